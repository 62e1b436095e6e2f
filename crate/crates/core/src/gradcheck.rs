//! Central finite-difference checks of the analytic (autograd) gradients of
//! every training loss, in f64 on small random instances.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::lexicon::l2_normalize_rows;
use crate::model::Stage;
use crate::objectives::{distill_kl, flops_loss, lexicon_objective, mlm_loss, total_loss, vtc_nce, Branch, SimilarityBundle};
use crate::seed;

pub const FD_EPS: f64 = 1e-4;

/// Instance size used by the checks.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub batch: usize,
    pub lexicon: usize,
    pub latent: usize,
    pub masked: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { batch: 4, lexicon: 8, latent: 8, masked: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub loss: &'static str,
    pub seed: u64,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over all inputs.
    pub rel_error: f64,
}

type LossFn<'a> = Box<dyn Fn(&[Tensor]) -> Result<Tensor> + 'a>;

/// A loss, its inputs, and how many leading inputs it is differentiated
/// against (the distillation teacher is a constant by definition).
struct Case {
    name: &'static str,
    f: LossFn<'static>,
    inputs: Vec<Tensor>,
    wrt: usize,
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Analytic and numeric gradients of `f` w.r.t. the first `wrt` inputs,
/// flattened. Later inputs are held constant (stop-gradient targets).
pub fn gradients(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], wrt: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let vars: Vec<Var> = inputs.iter().map(Var::from_tensor).collect::<candle_core::Result<_>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors)?.backward()?;
    let mut analytic = Vec::new();
    for v in &vars[..wrt] {
        match grads.get(v.as_tensor()) {
            Some(g) => analytic.extend(g.flatten_all()?.to_vec1::<f64>()?),
            None => analytic.extend(std::iter::repeat_n(0.0, v.elem_count())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for (k, x) in inputs.iter().enumerate().take(wrt) {
        let base: Vec<f64> = x.flatten_all()?.to_vec1()?;
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut vals = base.clone();
                vals[i] += delta;
                let mut args = inputs.to_vec();
                args[k] = Tensor::from_vec(vals, x.dims(), x.device())?;
                scalar(&f(&args)?)
            };
            numeric.push((eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS));
        }
    }
    Ok((analytic, numeric))
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Result<Tensor> {
    let v: Vec<f64> = (0..shape.0 * shape.1).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Strictly positive activations, away from 0 so ±ε stays nonnegative.
fn positive(rng: &mut impl Rng, shape: (usize, usize)) -> Result<Tensor> {
    let v: Vec<f64> = (0..shape.0 * shape.1).map(|_| rng.random_range(0.05..2.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// The five losses with their random inputs for one seed.
fn cases(seed_: u64, d: Dims, tau: f64, beta: f64) -> Result<Vec<Case>> {
    let mut rng = seed::rng(seed_, "gradcheck", 0);
    let (b, w, h, n) = (d.batch, d.lexicon, d.latent, d.masked);
    let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..w as u32)).collect();
    let t2 = targets.clone();
    let vtc: LossFn = Box::new(move |x| vtc_nce(&l2_normalize_rows(&x[0])?, &l2_normalize_rows(&x[1])?, tau));
    let mlm: LossFn = Box::new(move |x| mlm_loss(&x[0], &targets));
    let flops: LossFn = Box::new(|x| flops_loss(&x[0], &x[1]));
    let distill: LossFn = Box::new(move |x| {
        let lex = SimilarityBundle::from_embeddings(&l2_normalize_rows(&x[0])?, &l2_normalize_rows(&x[1])?, Branch::Lexicon)?;
        let lat = SimilarityBundle::from_embeddings(&l2_normalize_rows(&x[2])?, &l2_normalize_rows(&x[3])?, Branch::Latent)?;
        distill_kl(&lex, &lat, tau)
    });
    let total: LossFn = Box::new(move |x| {
        let (v_lex, t_lex) = (l2_normalize_rows(&x[0])?, l2_normalize_rows(&x[1])?);
        let (v_lat, t_lat) = (l2_normalize_rows(&x[2])?, l2_normalize_rows(&x[3])?);
        let vtc_lex = vtc_nce(&v_lex, &t_lex, tau)?;
        let vtc_lat = vtc_nce(&v_lat, &t_lat, tau)?;
        let fl = flops_loss(&x[0], &x[1])?;
        let m = mlm_loss(&x[4], &t2)?;
        let lex = SimilarityBundle::from_embeddings(&v_lex, &t_lex, Branch::Lexicon)?;
        // teacher: constant copies of the latent inputs
        let teacher = SimilarityBundle::from_embeddings(&l2_normalize_rows(&x[5])?, &l2_normalize_rows(&x[6])?, Branch::Latent)?;
        let kl = distill_kl(&lex, &teacher, tau)?;
        let obj = lexicon_objective(Stage::Two, &vtc_lex, &fl, Some(&m), beta)?;
        total_loss(&obj, &vtc_lat, &kl, 0.5)
    });
    let case = |name, f, inputs: Vec<Tensor>, wrt| Case { name, f, inputs, wrt };
    Ok(vec![
        case("vtc_nce", vtc, vec![normal(&mut rng, (b, h), 1.0)?, normal(&mut rng, (b, h), 1.0)?], 2),
        case("mlm_loss", mlm, vec![normal(&mut rng, (n, w), 2.0)?], 1),
        case("flops_loss", flops, vec![positive(&mut rng, (b, w))?, positive(&mut rng, (b, w))?], 2),
        case(
            "distill_kl",
            distill,
            vec![positive(&mut rng, (b, w))?, positive(&mut rng, (b, w))?, normal(&mut rng, (b, h), 1.0)?, normal(&mut rng, (b, h), 1.0)?],
            2,
        ),
        {
            let (v_lat, t_lat) = (normal(&mut rng, (b, h), 1.0)?, normal(&mut rng, (b, h), 1.0)?);
            let (v_lex, t_lex) = (positive(&mut rng, (b, w))?, positive(&mut rng, (b, w))?);
            let logits = normal(&mut rng, (n, w), 2.0)?;
            case("total_loss", total, vec![v_lex, t_lex, v_lat.clone(), t_lat.clone(), logits, v_lat, t_lat], 5)
        },
    ])
}

/// Check all five losses for one seed at temperature `tau`.
pub fn check_seed(seed_: u64, dims: Dims, tau: f64) -> Result<Vec<GradCheck>> {
    cases(seed_, dims, tau, 1e-2)?
        .into_iter()
        .map(|c| {
            let (a, n) = gradients(c.f.as_ref(), &c.inputs, c.wrt)?;
            Ok(GradCheck { loss: c.name, seed: seed_, rel_error: rel_error(&a, &n) })
        })
        .collect()
}

/// Largest absolute gradient that reaches the latent (teacher) inputs of
/// the distillation loss; must be exactly zero.
pub fn distill_teacher_gradient(seed_: u64, dims: Dims, tau: f64) -> Result<f64> {
    let c = cases(seed_, dims, tau, 0.0)?.into_iter().find(|c| c.name == "distill_kl").expect("distill case");
    let (a, _) = gradients(c.f.as_ref(), &c.inputs, c.inputs.len())?;
    let student = 2 * dims.batch * dims.lexicon;
    Ok(a[student..].iter().fold(0.0f64, |m, g| m.max(g.abs())))
}
