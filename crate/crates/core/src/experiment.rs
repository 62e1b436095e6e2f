//! End-to-end pipeline (corpus → stage 0 → stages 1–2 → evaluation) and the
//! ablation grids built on it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_corpus, ConceptPool, Corpus};
use crate::error::{Error, Result};
use crate::eval::{grounding_from_vectors, EvalIndex, GroundingReport, RetrievalReport, ScoreBranch};
use crate::lexicon::{sparsity_stats, Lexicon, SparsityStats};
use crate::model::DualStreamModel;
use crate::trainer::{run_stage0_mlm, Stage0Report, StepRecord, Trainer};

/// Retrieval summary without per-query ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: usize,
}

impl From<&RetrievalReport> for RetrievalSummary {
    fn from(r: &RetrievalReport) -> Self {
        Self { r_at_1: r.r_at_1, r_at_5: r.r_at_5, r_at_10: r.r_at_10, median_rank: r.median_rank }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub queries: usize,
    pub latent: RetrievalSummary,
    pub lexicon: RetrievalSummary,
    pub fused: RetrievalSummary,
    /// Video-to-text retrieval with fused scores.
    pub fused_v2t: RetrievalSummary,
    /// Video lexicon vectors against the scene concepts.
    pub grounding: GroundingReport,
    /// The same report for caption lexicon vectors.
    pub text_grounding: GroundingReport,
    pub video_sparsity: SparsityStats,
}

impl EvalSummary {
    pub fn branch(&self, b: ScoreBranch) -> &RetrievalSummary {
        match b {
            ScoreBranch::Latent => &self.latent,
            ScoreBranch::Lexicon => &self.lexicon,
            ScoreBranch::Fused => &self.fused,
        }
    }
}

/// R@1 of a random ranking of `n` candidates, in percent.
pub fn random_r_at_1(n: usize) -> f64 {
    100.0 / n as f64
}

pub fn evaluate(model: &DualStreamModel, corpus: &Corpus, lexicon: &Lexicon, cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let pairs = corpus.split(cfg.eval.split);
    let index = EvalIndex::build(model, pairs)?;
    let fused = index.scores(ScoreBranch::Fused)?;
    let v2t = crate::eval::retrieval_metrics(&crate::eval::transpose(&fused), &index.ground_truth)?;
    let concepts: Vec<Vec<String>> = pairs.iter().map(|p| p.scene.concepts.clone()).collect();
    Ok(EvalSummary {
        split: cfg.eval.split.name().to_string(),
        queries: pairs.len(),
        latent: (&index.report(ScoreBranch::Latent)?).into(),
        lexicon: (&index.report(ScoreBranch::Lexicon)?).into(),
        fused: (&crate::eval::retrieval_metrics(&fused, &index.ground_truth)?).into(),
        fused_v2t: (&v2t).into(),
        grounding: grounding_from_vectors(&index.video_lexicon, &concepts, lexicon, cfg.eval.grounding_k)?,
        text_grounding: grounding_from_vectors(&index.text_lexicon, &concepts, lexicon, cfg.eval.grounding_k)?,
        video_sparsity: sparsity_stats(&index.video_lexicon, cfg.eval.active_threshold)?,
    })
}

/// Corpus and lexicon for a configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub pool: ConceptPool,
    pub lexicon: Lexicon,
    pub corpus: Corpus,
}

impl Workspace {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = cfg.pool();
        let lexicon = pool.lexicon()?;
        let corpus = generate_corpus(&pool, &cfg.data, cfg.data_seed())?;
        Ok(Self { pool, lexicon, corpus })
    }
}

type Snapshot = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn snapshot(model: &DualStreamModel) -> Result<Snapshot> {
    let values = model.params().snapshot()?;
    Ok(model
        .params()
        .params()
        .iter()
        .map(|p| (p.name.clone(), (p.var.dims().to_vec(), values[&p.name].clone())))
        .collect())
}

/// Outcome of one full pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub stage0: Option<Stage0Report>,
    pub log: Vec<StepRecord>,
    pub clip_events: u64,
    pub eval: EvalSummary,
}

/// Memoises stage-0 weights and whole runs by configuration, so ablation
/// grids that share settings do not retrain.
#[derive(Debug, Default)]
pub struct RunCache {
    stage0: BTreeMap<String, (Snapshot, Stage0Report)>,
    runs: BTreeMap<String, RunResult>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn stage0_key(cfg: &ExperimentConfig) -> Result<String> {
    let t = &cfg.train;
    Ok(serde_json::to_string(&(
        cfg.seed,
        &cfg.lexicon,
        &cfg.data,
        cfg.encoder_config()?,
        t.stage0_epochs,
        t.stage0_lr_peak,
        t.batch_size,
        t.mask_ratio,
        t.weight_decay,
        t.grad_clip,
    ))?)
}

fn run_key(cfg: &ExperimentConfig) -> Result<String> {
    // output_dir and ablation settings do not influence a run
    Ok(serde_json::to_string(&(cfg.seed, &cfg.lexicon, &cfg.data, &cfg.encoder, &cfg.loss, &cfg.train, &cfg.eval))?)
}

/// Fresh model with stage 0 applied (from the cache when possible).
pub fn pretrained_model(ws: &Workspace, cfg: &ExperimentConfig, cache: &mut RunCache) -> Result<(DualStreamModel, Option<Stage0Report>)> {
    let mut model = DualStreamModel::new(cfg.encoder_config()?, cfg.init_seed())?;
    if cfg.train.stage0_epochs == 0 {
        return Ok((model, None));
    }
    let key = stage0_key(cfg)?;
    if let Some((snap, report)) = cache.stage0.get(&key) {
        model.params().load(snap)?;
        return Ok((model, Some(report.clone())));
    }
    let report = run_stage0_mlm(&mut model, &ws.corpus, &ws.lexicon, &cfg.train)?;
    cache.stage0.insert(key, (snapshot(&model)?, report.clone()));
    Ok((model, Some(report)))
}

/// Stage 0, training and evaluation for one configuration.
pub fn run_experiment(ws: &Workspace, cfg: &ExperimentConfig, cache: &mut RunCache) -> Result<RunResult> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let key = run_key(&cfg)?;
    if let Some(r) = cache.runs.get(&key) {
        return Ok(r.clone());
    }
    let (model, stage0) = pretrained_model(ws, &cfg, cache)?;
    let mut trainer = Trainer::new(model, &ws.corpus, &ws.lexicon, cfg.train.clone(), cfg.loss.clone())?;
    trainer.run(None)?;
    let eval = evaluate(trainer.model(), &ws.corpus, &ws.lexicon, &cfg)?;
    let result = RunResult { stage0, log: trainer.state().history.clone(), clip_events: trainer.state().clip_events, eval };
    cache.runs.insert(key, result.clone());
    Ok(result)
}

// ---- ablations -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Modifier {
    /// Text stream trainable during stage 1.
    NoFreeze,
    /// No MLM term in stage 2.
    NoMlm,
    /// Latent and lexicon branches share no blocks (N = 0, M = N + M).
    NoStemShare,
    /// No latent → lexicon distillation.
    NoDistill,
    /// N shared stem blocks, the remaining depth specific.
    StemBlocks(usize),
    /// FLOPs weight.
    Beta(f64),
}

impl Modifier {
    fn parse(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownVariant(s.to_string());
        Ok(match s {
            "no_freeze" => Self::NoFreeze,
            "no_mlm" => Self::NoMlm,
            "no_stem_share" => Self::NoStemShare,
            "no_distill" => Self::NoDistill,
            _ => {
                if let Some(n) = s.strip_prefix("n=") {
                    Self::StemBlocks(n.parse().map_err(|_| unknown())?)
                } else if let Some(b) = s.strip_prefix("beta=") {
                    Self::Beta(b.parse().map_err(|_| unknown())?)
                } else {
                    return Err(unknown());
                }
            }
        })
    }

    fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        let depth = cfg.encoder.stem_blocks + cfg.encoder.specific_blocks;
        match self {
            Self::NoFreeze => cfg.train.freeze_text = false,
            Self::NoMlm => cfg.train.use_mlm = false,
            Self::NoDistill => cfg.train.use_distill = false,
            Self::NoStemShare => {
                cfg.encoder.stem_blocks = 0;
                cfg.encoder.specific_blocks = depth;
            }
            Self::StemBlocks(n) => {
                if n > depth {
                    return Err(Error::UnknownVariant(format!("n={n} exceeds encoder depth {depth}")));
                }
                cfg.encoder.stem_blocks = n;
                cfg.encoder.specific_blocks = depth - n;
            }
            Self::Beta(b) => cfg.loss.beta = b,
        }
        Ok(())
    }
}

/// A named set of modifiers applied to a base configuration, written as
/// `mod+mod+...` (e.g. `no_freeze+no_mlm`); `full` is the unmodified base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub spec: String,
    pub modifiers: Vec<Modifier>,
}

impl Variant {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Err(Error::UnknownVariant(String::new()));
        }
        let modifiers = if spec == "full" {
            Vec::new()
        } else {
            spec.split('+').map(|m| Modifier::parse(m.trim())).collect::<Result<_>>()?
        };
        Ok(Self { spec: spec.to_string(), modifiers })
    }

    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        for m in &self.modifiers {
            m.apply(&mut cfg)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Grid {
    Table4,
    Table5,
    NSweep,
    Custom(Vec<String>),
}

impl Grid {
    pub fn parse(name: &str, custom: &[String]) -> Result<Self> {
        match name {
            "table4" => Ok(Self::Table4),
            "table5" => Ok(Self::Table5),
            "nsweep" => Ok(Self::NSweep),
            "custom" => Ok(Self::Custom(custom.to_vec())),
            other => Err(Error::UnknownVariant(format!("grid '{other}'"))),
        }
    }

    /// `(row label, variant)` in table order.
    pub fn rows(&self, base: &ExperimentConfig) -> Result<Vec<(String, Variant)>> {
        let named = |rows: &[(&str, &str)]| -> Result<Vec<(String, Variant)>> {
            rows.iter().map(|(l, s)| Ok((l.to_string(), Variant::parse(s)?))).collect()
        };
        match self {
            // Table 4: freezing × MLM
            Self::Table4 => named(&[("A", "no_freeze+no_mlm"), ("B", "no_mlm"), ("C", "no_freeze"), ("D", "full")]),
            // Table 5: structure sharing, then + self-distillation
            Self::Table5 => named(&[("A", "no_stem_share+no_distill"), ("B", "no_distill"), ("C", "full")]),
            Self::NSweep => {
                let depth = base.encoder.stem_blocks + base.encoder.specific_blocks;
                (0..=depth).map(|n| Ok((format!("N={n}"), Variant::parse(&format!("n={n}"))?))).collect()
            }
            Self::Custom(specs) => {
                if specs.is_empty() {
                    return Err(Error::Config("custom grid needs at least one variant".into()));
                }
                specs.iter().map(|s| Ok((s.clone(), Variant::parse(s)?))).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: String,
    pub freeze: bool,
    pub mlm: bool,
    pub stem_blocks: usize,
    pub distill: bool,
    pub beta: f64,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { " " };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:<26} {:^6} {:^4} {:>2} {:^7} {:>7} | {:>6} {:>6} {:>6} {:>4} | {:>6} {:>6} | {:>5}",
            "row", "variant", "freeze", "mlm", "N", "distill", "beta", "R@1", "R@5", "R@10", "MdR", "lat@1", "lex@1", "prec"
        );
        for r in &self.rows {
            let e = &r.eval;
            let _ = writeln!(
                s,
                "{:<8} {:<26} {:^6} {:^4} {:>2} {:^7} {:>7.0e} | {:>6.1} {:>6.1} {:>6.1} {:>4} | {:>6.1} {:>6.1} | {:>5.3}",
                r.label,
                r.variant,
                mark(r.freeze),
                mark(r.mlm),
                r.stem_blocks,
                mark(r.distill),
                r.beta,
                e.fused.r_at_1,
                e.fused.r_at_5,
                e.fused.r_at_10,
                e.fused.median_rank,
                e.latent.r_at_1,
                e.lexicon.r_at_1,
                e.grounding.mean_precision
            );
        }
        s
    }
}

pub fn run_ablation(ws: &Workspace, base: &ExperimentConfig, grid: &Grid, cache: &mut RunCache) -> Result<AblationTable> {
    run_ablation_with(ws, base, grid, cache, |_, _| {})
}

/// As [`run_ablation`], calling `progress(label, row)` after each variant.
pub fn run_ablation_with(
    ws: &Workspace,
    base: &ExperimentConfig,
    grid: &Grid,
    cache: &mut RunCache,
    mut progress: impl FnMut(&str, &AblationRow),
) -> Result<AblationTable> {
    let rows = grid.rows(base)?;
    // resolve every variant first so a bad spec fails before any training
    let configs: Vec<(String, Variant, ExperimentConfig)> = rows
        .into_iter()
        .map(|(label, v)| {
            let cfg = v.apply(base)?;
            Ok((label, v, cfg))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(configs.len());
    for (label, variant, cfg) in configs {
        let result = run_experiment(ws, &cfg, cache)?;
        let row = AblationRow {
            label: label.clone(),
            variant: variant.spec.clone(),
            freeze: cfg.train.freeze_text,
            mlm: cfg.train.use_mlm,
            stem_blocks: cfg.encoder.stem_blocks,
            distill: cfg.train.use_distill,
            beta: cfg.loss.beta,
            eval: result.eval,
        };
        progress(&label, &row);
        out.push(row);
    }
    let grid_name = match grid {
        Grid::Table4 => "table4",
        Grid::Table5 => "table5",
        Grid::NSweep => "nsweep",
        Grid::Custom(_) => "custom",
    };
    Ok(AblationTable { grid: grid_name.to_string(), rows: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::parse("full").unwrap().modifiers, vec![]);
        assert_eq!(Variant::parse("no_freeze+no_mlm").unwrap().modifiers, vec![Modifier::NoFreeze, Modifier::NoMlm]);
        assert_eq!(Variant::parse("n=2").unwrap().modifiers, vec![Modifier::StemBlocks(2)]);
        assert_eq!(Variant::parse("beta=0.01").unwrap().modifiers, vec![Modifier::Beta(0.01)]);
        assert!(matches!(Variant::parse("no_wings"), Err(Error::UnknownVariant(_))));
        assert!(matches!(Grid::parse("table9", &[]), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn grid_shapes() {
        let base = ExperimentConfig::default();
        assert_eq!(Grid::Table4.rows(&base).unwrap().len(), 4);
        assert_eq!(Grid::Table5.rows(&base).unwrap().len(), 3);
        let sweep = Grid::NSweep.rows(&base).unwrap();
        assert_eq!(sweep.len(), 5);
        let full = sweep.last().unwrap().1.apply(&base).unwrap();
        assert_eq!((full.encoder.stem_blocks, full.encoder.specific_blocks), (4, 0));
        let sep = Variant::parse("no_stem_share").unwrap().apply(&base).unwrap();
        assert_eq!((sep.encoder.stem_blocks, sep.encoder.specific_blocks), (0, 4));
        assert!(Variant::parse("n=9").unwrap().apply(&base).is_err());
    }
}
