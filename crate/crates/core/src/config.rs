//! Declarative experiment configuration (TOML), with cross-field validation
//! and per-subsystem seeds derived from one master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ConceptPool, DataConfig, Split, ACTIONS, ATTRIBUTES, OBJECTS};
use crate::error::{Error, Result};
use crate::eval::{GroundingK, ScoreBranch};
use crate::lexicon::{Lexicon, PoolMode};
use crate::model::EncoderConfig;
use crate::objectives::LossConfig;
use crate::seed;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexiconSection {
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub attributes: Vec<String>,
    /// Video symbols that carry no concept.
    pub num_background: u32,
}

impl Default for LexiconSection {
    fn default() -> Self {
        let own = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        Self { objects: own(OBJECTS), actions: own(ACTIONS), attributes: own(ATTRIBUTES), num_background: 4 }
    }
}

impl LexiconSection {
    pub fn pool(&self) -> ConceptPool {
        fn r(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        ConceptPool::from_words(&r(&self.objects), &r(&self.actions), &r(&self.attributes), self.num_background)
    }
}

/// Architecture knobs; the lexicon size, symbol count and input geometry are
/// derived from the lexicon and data sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub stem_blocks: usize,
    pub specific_blocks: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pool: PoolMode,
    pub init_std: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { stem_blocks: 3, specific_blocks: 1, hidden: 64, latent_dim: 32, heads: 4, mlp_ratio: 2, pool: PoolMode::Max, init_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub branch: ScoreBranch,
    pub grounding_k: GroundingK,
    /// Untrained initialisations averaged for the chance baseline.
    pub chance_seeds: usize,
    /// A lexicon dimension counts as active when its value exceeds this.
    pub active_threshold: f64,
    pub inspect_top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            branch: ScoreBranch::Fused,
            grounding_k: GroundingK::ConceptCount,
            chance_seeds: 100,
            active_threshold: 0.0,
            inspect_top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// `table4`, `table5`, `nsweep` or `custom`.
    pub grid: String,
    /// Variant specs for the custom grid, e.g. `"no_freeze+no_mlm"`, `"n=2"`, `"beta=0.01"`.
    pub variants: Vec<String>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { grid: "table4".into(), variants: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; data, initialisation and training seeds derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub lexicon: LexiconSection,
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub loss: LossConfig,
    /// `train.seed` is overwritten by the value derived from `seed`.
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 17,
            output_dir: PathBuf::from("runs/default"),
            lexicon: LexiconSection::default(),
            data: DataConfig::default(),
            encoder: EncoderSection::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        };
        cfg.train.seed = cfg.train_seed();
        cfg
    }
}

impl ExperimentConfig {
    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, "data", 0)
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "init", 0)
    }

    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train", 0)
    }

    /// Fill derived fields. Idempotent.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.train_seed();
        self
    }

    pub fn pool(&self) -> ConceptPool {
        self.lexicon.pool()
    }

    pub fn build_lexicon(&self) -> Result<Lexicon> {
        self.pool().lexicon()
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let lexicon = self.build_lexicon()?;
        let e = &self.encoder;
        let mut cfg = EncoderConfig::desk_default(lexicon.len(), self.pool().num_symbols(), &self.data);
        cfg.stem_blocks = e.stem_blocks;
        cfg.specific_blocks = e.specific_blocks;
        cfg.hidden = e.hidden;
        cfg.latent_dim = e.latent_dim;
        cfg.heads = e.heads;
        cfg.mlp_ratio = e.mlp_ratio;
        cfg.pool = e.pool;
        cfg.init_std = e.init_std;
        Ok(cfg)
    }

    /// Every cross-field constraint, checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pool().validate(self.data.max_concepts)?;
        self.build_lexicon()?;
        self.encoder_config()?.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let (train, val, test) = self.data.split_sizes();
        if train < self.train.batch_size {
            return Err(Error::Config(format!("train split ({train}) smaller than batch size ({})", self.train.batch_size)));
        }
        let eval_len = match self.eval.split {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        };
        if eval_len == 0 {
            return Err(Error::Config(format!("evaluation split '{}' is empty", self.eval.split.name())));
        }
        if self.train.stage0_epochs > 0 && val + test == 0 {
            return Err(Error::Config("stage 0 needs a held-out split".into()));
        }
        if self.eval.chance_seeds == 0 || self.eval.inspect_top_k == 0 {
            return Err(Error::Config("eval.chance_seeds and eval.inspect_top_k must be >= 1".into()));
        }
        if let GroundingK::Fixed(0) = self.eval.grounding_k {
            return Err(Error::Config("eval.grounding_k must be >= 1".into()));
        }
        if !(self.eval.active_threshold >= 0.0) {
            return Err(Error::Config("eval.active_threshold must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved configuration for provenance.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.clone().resolved().to_toml_string()?)?;
        Ok(())
    }
}
