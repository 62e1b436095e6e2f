use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Disjoint parameter groups. Freezing and checkpoint auditing work at this
/// granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    VideoEmbed,
    VideoStem,
    VideoLatent,
    VideoLexicon,
    VideoLatentHead,
    TextEmbed,
    TextStem,
    TextLatent,
    TextLexicon,
    TextLatentHead,
    /// The lexicon head shared by both streams (dense + norm + output bias).
    LexiconHead,
    /// Word table; also the lexicon head's output weight (tied).
    WordEmbeddings,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 12] = [
        ParamGroup::VideoEmbed,
        ParamGroup::VideoStem,
        ParamGroup::VideoLatent,
        ParamGroup::VideoLexicon,
        ParamGroup::VideoLatentHead,
        ParamGroup::TextEmbed,
        ParamGroup::TextStem,
        ParamGroup::TextLatent,
        ParamGroup::TextLexicon,
        ParamGroup::TextLatentHead,
        ParamGroup::LexiconHead,
        ParamGroup::WordEmbeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VideoEmbed => "video.embed",
            ParamGroup::VideoStem => "video.stem",
            ParamGroup::VideoLatent => "video.latent",
            ParamGroup::VideoLexicon => "video.lexicon",
            ParamGroup::VideoLatentHead => "video.latent_head",
            ParamGroup::TextEmbed => "text.embed",
            ParamGroup::TextStem => "text.stem",
            ParamGroup::TextLatent => "text.latent",
            ParamGroup::TextLexicon => "text.lexicon",
            ParamGroup::TextLatentHead => "text.latent_head",
            ParamGroup::LexiconHead => "lexicon_head",
            ParamGroup::WordEmbeddings => "word_embeddings",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn is_video(self) -> bool {
        matches!(
            self,
            ParamGroup::VideoEmbed
                | ParamGroup::VideoStem
                | ParamGroup::VideoLatent
                | ParamGroup::VideoLexicon
                | ParamGroup::VideoLatentHead
        )
    }

    pub fn is_text(self) -> bool {
        matches!(
            self,
            ParamGroup::TextEmbed
                | ParamGroup::TextStem
                | ParamGroup::TextLatent
                | ParamGroup::TextLexicon
                | ParamGroup::TextLatentHead
        )
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Named, grouped trainable parameters in creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
    seed: u64,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new(), seed, device }
    }

    /// Each parameter draws from its own name-keyed stream, so adding a
    /// parameter never shifts the initial values of the others.
    pub(crate) fn create(&mut self, group: ParamGroup, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}.{name}", group.name());
        if self.by_name.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let mut rng = seed::rng(self.seed, &full, 0);
                let normal = Normal::new(0.0f64, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let x = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * std {
                            break x as f32;
                        }
                    })
                    .collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.by_name.insert(full.clone(), self.params.len());
        self.params.push(Param { name: full, group, var });
        Ok(t)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn group_counts(&self) -> Vec<(ParamGroup, usize)> {
        let mut counts: BTreeMap<ParamGroup, usize> = BTreeMap::new();
        for p in &self.params {
            *counts.entry(p.group).or_default() += p.var.elem_count();
        }
        counts.into_iter().collect()
    }

    /// Host copies of every parameter, by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)))
            .collect()
    }

    /// Overwrite values in place; shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for p in &self.params {
            let (shape, data) = values
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if shape.as_slice() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    shape,
                    p.var.dims()
                )));
            }
            p.var.set(&Tensor::from_slice(data, shape.as_slice(), &self.device)?)?;
        }
        Ok(())
    }
}
