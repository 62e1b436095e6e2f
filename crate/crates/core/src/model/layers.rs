//! Transformer building blocks over candle primitives. Everything here is
//! composed from differentiable tensor ops so gradients flow through
//! `Tensor::backward`.

use candle_core::{Tensor, D};

use super::params::{Init, ParamGroup, ParamStore};
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    /// `(out, in)`
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        let weight = store.create(group, &format!("{name}.weight"), &[d_out, d_in], Init::TruncNormal(std))?;
        let bias = store.create(group, &format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.create(group, &format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.create(group, &format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // Shift by a detached max; softmax is shift invariant so gradients are exact.
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, d: usize, heads: usize, mlp_ratio: usize, std: f64) -> Result<Self> {
        let p = |s: &str| format!("{name}.{s}");
        Ok(Self {
            ln1: LayerNorm::new(store, group, &p("ln1"), d)?,
            qkv: Linear::new(store, group, &p("qkv"), d, 3 * d, std)?,
            proj: Linear::new(store, group, &p("proj"), d, d, std)?,
            ln2: LayerNorm::new(store, group, &p("ln2"), d)?,
            fc1: Linear::new(store, group, &p("fc1"), d, mlp_ratio * d, std)?,
            fc2: Linear::new(store, group, &p("fc2"), mlp_ratio * d, d, std)?,
            heads,
        })
    }

    /// `x`: `(B, L, d)`; `attn_bias`: additive `(B, 1, 1, L)` key mask.
    pub fn forward(&self, x: &Tensor, attn_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(&self.ln1.forward(x)?)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = attn_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let ctx = softmax_last(&scores)?.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        let x = (x + self.proj.forward(&ctx)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000f64, 1001., 999.], [0., 0., 0.]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for r in &s {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 1.0 / 3.0).abs() < 1e-12);
        let ls: Vec<Vec<f64>> = log_softmax_last(&x).unwrap().to_vec2().unwrap();
        assert!((ls[0][1] - s[0][1].ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardises() {
        let mut store = ParamStore::new(0, Device::Cpu);
        let ln = LayerNorm::new(&mut store, ParamGroup::VideoStem, "ln", 4).unwrap();
        let x = Tensor::new(&[[1f32, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y: Vec<f32> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        let var: f32 = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let mut store = ParamStore::new(1, Device::Cpu);
        let block = Block::new(&mut store, ParamGroup::TextStem, "b", 8, 2, 2, 0.2).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 4, 8), &Device::Cpu).unwrap();
        let bias = Tensor::new(&[0f32, 0., -1e9, -1e9], &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let full = block.forward(&x, Some(&bias)).unwrap();
        // perturb the masked positions: unmasked outputs must not move
        let noise = Tensor::cat(&[Tensor::zeros((1, 2, 8), DType::F32, &Device::Cpu).unwrap(), Tensor::ones((1, 2, 8), DType::F32, &Device::Cpu).unwrap()], 1).unwrap();
        let moved = block.forward(&(&x + noise).unwrap(), Some(&bias)).unwrap();
        let diff = (full.narrow(1, 0, 2).unwrap() - moved.narrow(1, 0, 2).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }
}
