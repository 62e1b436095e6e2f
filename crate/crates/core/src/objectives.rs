//! Training objectives: in-batch NCE, masked-token cross-entropy, the FLOPs
//! sparsity regulariser, similarity self-distillation, and how they combine
//! across the two training stages.
//!
//! Losses operate on candle tensors of any float dtype so the same code is
//! used for f32 training and f64 gradient checks.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{log_softmax_last, Stage};

/// Unit-norm tolerance accepted by [`vtc_nce`].
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// NCE temperature.
    pub tau: f64,
    /// FLOPs weight.
    pub beta: f64,
    /// Softmax temperature for the distillation distributions.
    pub distill_tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.05, beta: 1e-4, distill_tau: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.distill_tau > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear schedule from `initial` at step 0 to `final_value` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub initial: f64,
    pub final_value: f64,
    pub total_steps: u64,
}

impl LambdaSchedule {
    pub fn decay(total_steps: u64) -> Self {
        Self { initial: 1.0, final_value: 0.0, total_steps }
    }
}

/// Distillation weight at `step`; steps past the end clamp to the final value.
pub fn lambda_at(step: u64, schedule: &LambdaSchedule) -> Result<f64> {
    if schedule.total_steps == 0 {
        return Err(Error::Config("lambda schedule needs total_steps >= 1".into()));
    }
    let frac = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    Ok(schedule.initial + (schedule.final_value - schedule.initial) * frac)
}

fn check_unit_rows(x: &Tensor) -> Result<()> {
    let norms: Vec<f64> = x.to_dtype(DType::F64)?.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1()?;
    for (row, &norm) in norms.iter().enumerate() {
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

fn eye_like(b: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::eye(b, like.dtype(), like.device())?)
}

/// Symmetric in-batch NCE, summed over the batch in both directions.
///
/// `videos` and `texts` are `(B, n)` with unit-norm rows; pair `i` is
/// `(videos[i], texts[i])` and every other row in the batch is a negative.
pub fn vtc_nce(videos: &Tensor, texts: &Tensor, tau: f64) -> Result<Tensor> {
    if videos.dims() != texts.dims() || videos.rank() != 2 {
        return Err(shape_err("vtc_nce inputs", format!("{:?}", videos.dims()), format!("{:?}", texts.dims())));
    }
    let b = videos.dim(0)?;
    if b < 2 {
        return Err(Error::Config(format!("vtc_nce needs B >= 2, got {b}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be > 0".into()));
    }
    check_unit_rows(videos)?;
    check_unit_rows(texts)?;
    nce_unchecked(videos, texts, tau)
}

pub(crate) fn nce_unchecked(videos: &Tensor, texts: &Tensor, tau: f64) -> Result<Tensor> {
    let b = videos.dim(0)?;
    let logits = (videos.matmul(&texts.t()?)? / tau)?;
    let eye = eye_like(b, &logits)?;
    let v2t = log_softmax_last(&logits)?.mul(&eye)?.sum_all()?;
    let t2v = log_softmax_last(&logits.t()?.contiguous()?)?.mul(&eye)?.sum_all()?;
    Ok((v2t + t2v)?.neg()?)
}

/// Mean cross-entropy of `logits` (`(n, |W|)`, rows at masked positions)
/// against the original token ids.
pub fn mlm_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, w) = logits.dims2()?;
    if n == 0 {
        return Err(Error::Empty("mlm_loss needs at least one masked position"));
    }
    if n != targets.len() {
        return Err(shape_err("mlm targets", n, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= w) {
        return Err(Error::TargetOutOfRange { target: t as usize, size: w });
    }
    let idx = Tensor::from_slice(targets, (n, 1), logits.device())?;
    let picked = log_softmax_last(logits)?.gather(&idx, 1)?;
    Ok((picked.sum_all()? * (-1.0 / n as f64))?)
}

fn check_nonnegative(x: &Tensor) -> Result<()> {
    let min = x.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
    if min < 0.0 {
        let flat: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let index = flat.iter().position(|&v| v < 0.0).unwrap_or(0);
        return Err(Error::NegativeActivation { index, value: min });
    }
    Ok(())
}

/// `Σ_k (mean_i v_ik)² + Σ_k (mean_i t_ik)²` over raw (unnormalised)
/// lexicon activations.
pub fn flops_loss(videos: &Tensor, texts: &Tensor) -> Result<Tensor> {
    if videos.dims() != texts.dims() || videos.rank() != 2 {
        return Err(shape_err("flops_loss inputs", format!("{:?}", videos.dims()), format!("{:?}", texts.dims())));
    }
    check_nonnegative(videos)?;
    check_nonnegative(texts)?;
    let v = videos.mean(0)?.sqr()?.sum_all()?;
    let t = texts.mean(0)?.sqr()?.sum_all()?;
    Ok((v + t)?)
}

/// Which representation a similarity bundle was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Latent,
    Lexicon,
}

/// Video-to-text scores of a batch and their transpose.
#[derive(Debug, Clone)]
pub struct SimilarityBundle {
    pub v2t: Tensor,
    pub t2v: Tensor,
    pub which: Branch,
}

impl SimilarityBundle {
    /// From unit-norm `(B, n)` video and text rows.
    pub fn from_embeddings(videos: &Tensor, texts: &Tensor, which: Branch) -> Result<Self> {
        Self::from_v2t(videos.matmul(&texts.t()?)?, which)
    }

    pub fn from_v2t(v2t: Tensor, which: Branch) -> Result<Self> {
        let (r, c) = v2t.dims2()?;
        if r != c {
            return Err(shape_err("similarity bundle", format!("{r}x{r}"), format!("{r}x{c}")));
        }
        let t2v = v2t.t()?.contiguous()?;
        Ok(Self { v2t, t2v, which })
    }

    pub fn detach(&self) -> Self {
        Self { v2t: self.v2t.detach(), t2v: self.t2v.detach(), which: self.which }
    }
}

/// Row-averaged `KL(softmax(S/τ_d) ‖ softmax(T/τ_d))`.
fn kl_rows(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<Tensor> {
    let log_p = log_softmax_last(&(student / tau)?)?;
    let log_q = log_softmax_last(&(teacher / tau)?)?;
    let rows = student.dim(0)? as f64;
    let kl = log_p.exp()?.mul(&(log_p - log_q)?)?.sum_all()?;
    Ok((kl / rows)?)
}

/// Self-distillation from latent similarities (teacher) to lexicon
/// similarities (student), both directions.
///
/// The teacher bundle is detached here, so no gradient reaches the latent
/// branch through this loss.
pub fn distill_kl(lex: &SimilarityBundle, lat: &SimilarityBundle, distill_tau: f64) -> Result<Tensor> {
    if lex.v2t.dims() != lat.v2t.dims() {
        return Err(shape_err("distill bundles", format!("{:?}", lex.v2t.dims()), format!("{:?}", lat.v2t.dims())));
    }
    if !(distill_tau > 0.0) {
        return Err(Error::Config("distill_tau must be > 0".into()));
    }
    let teacher = lat.detach();
    let v2t = kl_rows(&lex.v2t, &teacher.v2t, distill_tau)?;
    let t2v = kl_rows(&lex.t2v, &teacher.t2v, distill_tau)?;
    Ok((v2t + t2v)?)
}

/// Arithmetic shared by scalar and tensor loss values.
pub trait LossValue: Sized {
    fn plus(&self, other: &Self) -> Result<Self>;
    fn times(&self, c: f64) -> Result<Self>;
}

impl LossValue for f64 {
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }

    fn times(&self, c: f64) -> Result<Self> {
        Ok(self * c)
    }
}

impl LossValue for Tensor {
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok((self + other)?)
    }

    fn times(&self, c: f64) -> Result<Self> {
        Ok((self * c)?)
    }
}

/// Stage 1: `vtc + β·flops`. Stage 2 adds the MLM term when one is given
/// (`None` when the MLM task is ablated away).
pub fn lexicon_objective<T: LossValue>(stage: Stage, vtc_lex: &T, flops: &T, mlm: Option<&T>, beta: f64) -> Result<T> {
    let base = vtc_lex.plus(&flops.times(beta)?)?;
    match (stage, mlm) {
        (Stage::Two, Some(m)) => base.plus(m),
        _ => Ok(base),
    }
}

pub fn total_loss<T: LossValue>(lex_obj: &T, vtc_lat: &T, distill: &T, lambda: f64) -> Result<T> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    lex_obj.plus(vtc_lat)?.plus(&distill.times(lambda)?)
}

/// Per-step loss breakdown, one log record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub vtc_lat: f64,
    pub vtc_lex: f64,
    pub mlm: f64,
    pub flops: f64,
    pub distill: f64,
    pub lambda: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), n), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn nce_two_orthonormal_pairs() {
        let v = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let got = scalar(vtc_nce(&v, &v, 1.0).unwrap());
        // each of the 4 terms is -log(e / (e + 1)) = log(1 + e^-1)
        assert!((got - 4.0 * (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((got - 1.25304).abs() < 1e-5);
    }

    #[test]
    fn nce_duplicate_text_gives_log2_terms() {
        let v = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = t2(&[&[0.6, 0.8], &[0.6, 0.8]]);
        // v2t rows see two equal logits: each term log 2
        let logits = v.matmul(&t.t().unwrap()).unwrap();
        let ls: Vec<Vec<f64>> = log_softmax_last(&logits).unwrap().to_vec2().unwrap();
        assert!((ls[0][0] + 2f64.ln()).abs() < 1e-12 && (ls[1][1] + 2f64.ln()).abs() < 1e-12);
        assert!(scalar(vtc_nce(&v, &t, 0.3).unwrap()) >= 0.0);
    }

    #[test]
    fn nce_contract_violations() {
        let v = t2(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert!(matches!(vtc_nce(&v, &v, 1.0), Err(Error::NotNormalized { row: 1, .. })));
        let one = t2(&[&[1.0, 0.0]]);
        assert!(vtc_nce(&one, &one, 1.0).is_err());
    }

    #[test]
    fn mlm_examples() {
        let uniform = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(mlm_loss(&uniform, &[2]).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let sharp = t2(&[&[0.0, 20.0, 0.0]]);
        assert!(scalar(mlm_loss(&sharp, &[1]).unwrap()) < 1e-6);
        let two = t2(&[&[0.0, 1.0, 0.0], &[3.0, 0.0, -1.0]]);
        let a = scalar(mlm_loss(&two.narrow(0, 0, 1).unwrap(), &[0]).unwrap());
        let b = scalar(mlm_loss(&two.narrow(0, 1, 1).unwrap(), &[2]).unwrap());
        assert!((scalar(mlm_loss(&two, &[0, 2]).unwrap()) - (a + b) / 2.0).abs() < 1e-12);
        assert!(matches!(mlm_loss(&sharp, &[3]), Err(Error::TargetOutOfRange { .. })));
    }

    #[test]
    fn flops_examples() {
        let z = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(flops_loss(&z, &z).unwrap()), 0.0);
        let v = t2(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let t = t2(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!((scalar(flops_loss(&v, &t).unwrap()) - 2.0).abs() < 1e-12);
        let base = scalar(flops_loss(&v, &t).unwrap());
        let scaled = scalar(flops_loss(&(&v * 3.0).unwrap(), &(&t * 3.0).unwrap()).unwrap());
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        let neg = t2(&[&[1.0, -0.5, 0.0], &[1.0, 0.0, 0.0]]);
        assert!(matches!(flops_loss(&neg, &t), Err(Error::NegativeActivation { index: 1, .. })));
    }

    #[test]
    fn objective_composition() {
        assert_eq!(lexicon_objective(Stage::One, &1.0, &2.0, Some(&9.0), 0.5).unwrap(), 2.0);
        assert_eq!(lexicon_objective(Stage::Two, &1.0, &2.0, Some(&9.0), 0.5).unwrap(), 11.0);
        assert_eq!(lexicon_objective(Stage::Two, &1.0, &2.0, Some(&9.0), 0.0).unwrap(), 10.0);
        assert_eq!(lexicon_objective(Stage::Two, &1.0, &2.0, None, 0.5).unwrap(), 2.0);
        assert_eq!(total_loss(&1.0, &2.0, &4.0, 0.5).unwrap(), 5.0);
        assert_eq!(total_loss(&1.0, &2.0, &4.0, 0.0).unwrap(), 3.0);
        assert_eq!(total_loss(&0.0, &0.0, &0.0, 1.0).unwrap(), 0.0);
        assert!(total_loss(&0.0, &0.0, &0.0, 1.5).is_err());
    }

    #[test]
    fn distill_examples() {
        let a = SimilarityBundle::from_v2t(t2(&[&[0.3, -0.2], &[0.1, 0.9]]), Branch::Lexicon).unwrap();
        assert!(scalar(distill_kl(&a, &a, 0.05).unwrap()).abs() < 1e-12);

        // one-hot rows against uniform rows: log 2 per direction
        let lex = SimilarityBundle::from_v2t(t2(&[&[1000.0, 0.0], &[0.0, 1000.0]]), Branch::Lexicon).unwrap();
        let lat = SimilarityBundle::from_v2t(t2(&[&[0.0, 0.0], &[0.0, 0.0]]), Branch::Latent).unwrap();
        let got = scalar(distill_kl(&lex, &lat, 1.0).unwrap());
        assert!((got - 2.0 * 2f64.ln()).abs() < 1e-12);

        let shifted = SimilarityBundle::from_v2t((&a.v2t + 5.0).unwrap(), Branch::Lexicon).unwrap();
        let b = SimilarityBundle::from_v2t(t2(&[&[0.5, 0.1], &[-0.4, 0.2]]), Branch::Latent).unwrap();
        let d1 = scalar(distill_kl(&a, &b, 0.5).unwrap());
        let d2 = scalar(distill_kl(&shifted, &b, 0.5).unwrap());
        assert!((d1 - d2).abs() < 1e-12);
        let small = SimilarityBundle::from_v2t(t2(&[&[0.5]]), Branch::Latent).unwrap();
        assert!(distill_kl(&a, &small, 1.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let s = LambdaSchedule::decay(10);
        assert_eq!(lambda_at(0, &s).unwrap(), 1.0);
        assert_eq!(lambda_at(10, &s).unwrap(), 0.0);
        assert_eq!(lambda_at(5, &s).unwrap(), 0.5);
        assert_eq!(lambda_at(99, &s).unwrap(), 0.0);
        assert!(lambda_at(0, &LambdaSchedule::decay(0)).is_err());
    }
}
