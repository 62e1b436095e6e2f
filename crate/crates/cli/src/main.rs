//! `lexlat`: generate the desk corpus, pretrain the text stream, train, evaluate,
//! inspect lexicon vectors and run ablation grids.
//!
//! Configuration precedence: built-in defaults < `--config` file <
//! `LEXLAT_OUTPUT_DIR` (output directory only) < command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lexlat_core::checkpoint::{load_checkpoint_for, save_checkpoint, CheckpointMeta};
use lexlat_core::config::ExperimentConfig;
use lexlat_core::data::{generate_corpus, load_corpus, save_corpus, Corpus, DataConfig};
use lexlat_core::eval::{chance_grounding, format_listing, inspect_lexicon, ScoreBranch};
use lexlat_core::experiment::{evaluate, run_ablation_with, Grid, RunCache, Workspace};
use lexlat_core::model::DualStreamModel;
use lexlat_core::trainer::{run_stage0_mlm, write_loss_log, Trainer};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "lexlat", version, about = "Latent + lexicon video-text retrieval at desk scale")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment configuration (TOML). Defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every artifact of the run.
    #[arg(long, global = true, env = "LEXLAT_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Master seed; data, initialisation and training seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set train.epochs_total=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    Generate {
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Stage 0: masked-language-model pretraining of the text stream.
    PretrainText,
    /// Stages 1 and 2: two-stage semantics grounding.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Start from a fresh initialisation instead of the stage-0 checkpoint.
        #[arg(long)]
        skip_stage0: bool,
    },
    /// Retrieval metrics and grounding of the trained model.
    Eval {
        /// Scoring path; defaults to `eval.branch` from the config.
        #[arg(long, value_enum)]
        branch: Option<BranchArg>,
        /// Model to evaluate (default: the final training checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also compute the untrained-model grounding baseline.
        #[arg(long)]
        chance: bool,
    },
    /// Print the top lexicon words of held-out videos.
    InspectLexicon {
        /// Words listed per video; defaults to `eval.inspect_top_k`.
        #[arg(long)]
        top_k: Option<usize>,
        /// Number of videos to list.
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation grid (each variant trains from scratch).
    Ablate {
        /// Defaults to `ablation.grid` from the config.
        #[arg(long, value_enum)]
        grid: Option<GridArg>,
        /// Variant specs for the custom grid, e.g. `no_freeze+no_mlm`, `n=2`, `beta=0.01`.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    All,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Latent,
    Lexicon,
    Fused,
}

impl From<BranchArg> for ScoreBranch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Latent => ScoreBranch::Latent,
            BranchArg::Lexicon => ScoreBranch::Lexicon,
            BranchArg::Fused => ScoreBranch::Fused,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Table4,
    Table5,
    Nsweep,
    Custom,
}

impl GridArg {
    fn name(self) -> &'static str {
        match self {
            GridArg::Table4 => "table4",
            GridArg::Table5 => "table5",
            GridArg::Nsweep => "nsweep",
            GridArg::Custom => "custom",
        }
    }
}

// ---- configuration ------------------------------------------------------------

fn set_key(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got '{assignment}'"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        // bare words such as `--set eval.split=val`
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("--set {key}: '{p}' is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let text = match &g.config {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| format!("config: {e}"))?;
    for o in &g.overrides {
        set_key(&mut table, o)?;
    }
    if let Some(seed) = g.seed {
        table.insert("seed".into(), toml::Value::Integer(i64::try_from(seed)?));
    }
    if let Some(dir) = &g.output_dir {
        table.insert("output_dir".into(), toml::Value::String(dir.display().to_string()));
    }
    let cfg = ExperimentConfig::from_toml_str(&toml::to_string(&table)?)?;
    cfg.validate()?;
    Ok(cfg)
}

// ---- artifact layout ----------------------------------------------------------

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn manifest(&self) -> PathBuf {
        self.corpus().join("manifest.json")
    }
    fn stage0(&self) -> PathBuf {
        self.root.join("stage0")
    }
    fn stage0_model(&self) -> PathBuf {
        self.stage0().join("model.safetensors")
    }
    fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    fn stage1_model(&self) -> PathBuf {
        self.train().join("stage1.safetensors")
    }
    fn final_model(&self) -> PathBuf {
        self.train().join("final.safetensors")
    }
}

/// What `generate` wrote, checked by every later command.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    seed: u64,
    data_seed: u64,
    data: DataConfig,
    lexicon_size: usize,
    semantic_words: usize,
    num_symbols: usize,
    train: usize,
    val: usize,
    test: usize,
}

fn manifest_for(cfg: &ExperimentConfig, ws: &Workspace) -> Manifest {
    Manifest {
        seed: cfg.seed,
        data_seed: cfg.data_seed(),
        data: cfg.data.clone(),
        lexicon_size: ws.lexicon.len(),
        semantic_words: ws.lexicon.semantic_len(),
        num_symbols: ws.pool.num_symbols(),
        train: ws.corpus.train.len(),
        val: ws.corpus.val.len(),
        test: ws.corpus.test.len(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Create `dir` and record the resolved configuration of this command in it.
fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.write_resolved(&dir.join("config.toml"))?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(format!("missing {}: {hint}", path.display()).into())
    }
}

fn workspace(cfg: &ExperimentConfig, layout: &Layout) -> Result<Workspace> {
    require(&layout.manifest(), "run `lexlat generate` first")?;
    let stored: Manifest = serde_json::from_str(&fs::read_to_string(layout.manifest())?)?;
    let pool = cfg.pool();
    let lexicon = pool.lexicon()?;
    let corpus: Corpus = load_corpus(&layout.corpus())?;
    let ws = Workspace { pool, lexicon, corpus };
    if stored != manifest_for(cfg, &ws) {
        return Err(format!(
            "the corpus in {} was generated with a different seed or data/lexicon config; rerun `lexlat generate --force`",
            layout.corpus().display()
        )
        .into());
    }
    Ok(ws)
}

fn load_model(cfg: &ExperimentConfig, path: &Path, hint: &str) -> Result<DualStreamModel> {
    require(path, hint)?;
    Ok(load_checkpoint_for(path, &cfg.encoder_config()?)?.model)
}

// ---- commands -----------------------------------------------------------------

fn cmd_generate(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<()> {
    let dir = layout.corpus();
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() && !force {
        return Err(format!("{} already exists; pass --force to overwrite", dir.display()).into());
    }
    let pool = cfg.pool();
    let lexicon = pool.lexicon()?;
    let corpus = generate_corpus(&pool, &cfg.data, cfg.data_seed())?;
    let ws = Workspace { pool, lexicon, corpus };
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    prepare_dir(&dir, cfg)?;
    save_corpus(&ws.corpus, &dir)?;
    let manifest = manifest_for(cfg, &ws);
    write_json(&layout.manifest(), &manifest)?;
    fs::write(dir.join("lexicon.txt"), ws.lexicon.words().join("\n") + "\n")?;
    println!(
        "corpus: {} train / {} val / {} test pairs, |W| = {} ({} semantic) -> {}",
        manifest.train,
        manifest.val,
        manifest.test,
        manifest.lexicon_size,
        manifest.semantic_words,
        dir.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let ws = workspace(cfg, layout)?;
    prepare_dir(&layout.stage0(), cfg)?;
    let mut model = DualStreamModel::new(cfg.encoder_config()?, cfg.init_seed())?;
    let report = run_stage0_mlm(&mut model, &ws.corpus, &ws.lexicon, &cfg.train)?;
    let meta = CheckpointMeta { train: Some(cfg.train.clone()), loss: Some(cfg.loss.clone()), state: None };
    save_checkpoint(&model, &meta, None, &layout.stage0_model())?;
    write_json(&layout.stage0().join("report.json"), &report)?;
    println!(
        "stage 0: {} steps; held-out masked top-1 {:.3}, self-dimension top-1 {:.3} / top-5 {:.3}; {} clip events",
        report.steps, report.masked_accuracy, report.self_top1, report.self_top5, report.clip_events
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, layout: &Layout, stage: StageArg, skip_stage0: bool) -> Result<()> {
    let ws = workspace(cfg, layout)?;
    let dir = layout.train();
    let mut trainer = if stage == StageArg::Two {
        require(&layout.stage1_model(), "run `lexlat train --stage 1` first")?;
        Trainer::resume(&layout.stage1_model(), &ws.corpus, &ws.lexicon, cfg.train.clone(), cfg.loss.clone())?
    } else {
        let model = if skip_stage0 {
            DualStreamModel::new(cfg.encoder_config()?, cfg.init_seed())?
        } else {
            load_model(cfg, &layout.stage0_model(), "run `lexlat pretrain-text` first, or pass --skip-stage0")?
        };
        Trainer::new(model, &ws.corpus, &ws.lexicon, cfg.train.clone(), cfg.loss.clone())?
    };
    prepare_dir(&dir, cfg)?;
    let target = if stage == StageArg::One { trainer.stage1_steps() } else { trainer.total_steps() };
    trainer.run_until(target, Some(&dir.join("checkpoints")))?;
    let out = if stage == StageArg::One { layout.stage1_model() } else { layout.final_model() };
    trainer.save(&out)?;
    write_loss_log(&trainer.state().history, fs::File::create(dir.join("loss_log.jsonl"))?)?;
    let last = trainer.state().history.last();
    println!(
        "trained to step {}/{} (stage {}); last total loss {:.4}; {} clip events -> {}",
        trainer.state().step,
        trainer.total_steps(),
        trainer.state().stage,
        last.map(|r| r.loss.total).unwrap_or(f64::NAN),
        trainer.state().clip_events,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    branch: &'a str,
    checkpoint: String,
    selected: &'a lexlat_core::experiment::RetrievalSummary,
    summary: &'a lexlat_core::experiment::EvalSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    chance_grounding: Option<lexlat_core::eval::ChanceBaseline>,
}

fn cmd_eval(cfg: &ExperimentConfig, layout: &Layout, branch: Option<BranchArg>, checkpoint: Option<PathBuf>, chance: bool) -> Result<()> {
    let ws = workspace(cfg, layout)?;
    let path = checkpoint.unwrap_or_else(|| layout.final_model());
    let model = load_model(cfg, &path, "run `lexlat train` first, or pass --checkpoint")?;
    let branch: ScoreBranch = branch.map(Into::into).unwrap_or(cfg.eval.branch);
    let summary = evaluate(&model, &ws.corpus, &ws.lexicon, cfg)?;
    let chance = if chance {
        let pairs = ws.corpus.split(cfg.eval.split);
        Some(chance_grounding(&cfg.encoder_config()?, pairs, &ws.lexicon, cfg.eval.grounding_k, cfg.eval.chance_seeds)?)
    } else {
        None
    };
    let selected = summary.branch(branch);
    let dir = layout.root.join("eval");
    prepare_dir(&dir, cfg)?;
    let record = EvalRecord {
        branch: branch.name(),
        checkpoint: path.display().to_string(),
        selected,
        summary: &summary,
        chance_grounding: chance.clone(),
    };
    fs::write(dir.join(format!("metrics-{}.jsonl", branch.name())), serde_json::to_string(&record)? + "\n")?;
    println!(
        "{} t2v on {} ({} queries): R@1 {:.1}  R@5 {:.1}  R@10 {:.1}  MdR {}",
        branch.name(),
        summary.split,
        summary.queries,
        selected.r_at_1,
        selected.r_at_5,
        selected.r_at_10,
        selected.median_rank
    );
    println!(
        "grounding precision {:.3} (text {:.3}); mean active video dims {:.1}",
        summary.grounding.mean_precision, summary.text_grounding.mean_precision, summary.video_sparsity.mean_active_dims
    );
    if let Some(c) = chance {
        println!("untrained chance grounding {:.3} ± {:.3} over {} inits", c.mean_precision, c.std_precision, c.seeds);
    }
    Ok(())
}

fn cmd_inspect(cfg: &ExperimentConfig, layout: &Layout, top_k: Option<usize>, count: usize, checkpoint: Option<PathBuf>) -> Result<()> {
    let ws = workspace(cfg, layout)?;
    let path = checkpoint.unwrap_or_else(|| layout.final_model());
    let model = load_model(cfg, &path, "run `lexlat train` first, or pass --checkpoint")?;
    let pairs = ws.corpus.split(cfg.eval.split);
    let pairs = &pairs[..count.min(pairs.len())];
    let listings = inspect_lexicon(&model, pairs, &ws.lexicon, top_k.unwrap_or(cfg.eval.inspect_top_k))?;
    let text: String = listings.iter().map(|l| format_listing(l) + "\n").collect();
    let dir = layout.root.join("inspect");
    prepare_dir(&dir, cfg)?;
    fs::write(dir.join("lexicon.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, layout: &Layout, grid: Option<GridArg>, variants: Vec<String>) -> Result<()> {
    let ws = workspace(cfg, layout)?;
    let name = grid.map(GridArg::name).unwrap_or(cfg.ablation.grid.as_str());
    let variants = if variants.is_empty() { cfg.ablation.variants.clone() } else { variants };
    let grid = Grid::parse(name, &variants)?;
    grid.rows(cfg)?.iter().try_for_each(|(_, v)| v.apply(cfg).map(drop))?;
    let dir = layout.root.join("ablate").join(name);
    prepare_dir(&dir, cfg)?;
    let mut cache = RunCache::new();
    let table = run_ablation_with(&ws, cfg, &grid, &mut cache, |label, row| {
        eprintln!("{label} ({}): fused R@1 {:.1}", row.variant, row.eval.fused.r_at_1);
    })?;
    let rendered = table.render();
    fs::write(dir.join("table.txt"), &rendered)?;
    write_json(&dir.join("table.json"), &table)?;
    print!("{rendered}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let layout = Layout { root: cfg.output_dir.clone() };
    match cli.command {
        Command::Generate { force } => cmd_generate(&cfg, &layout, force),
        Command::PretrainText => cmd_pretrain(&cfg, &layout),
        Command::Train { stage, skip_stage0 } => cmd_train(&cfg, &layout, stage, skip_stage0),
        Command::Eval { branch, checkpoint, chance } => cmd_eval(&cfg, &layout, branch, checkpoint, chance),
        Command::InspectLexicon { top_k, count, checkpoint } => cmd_inspect(&cfg, &layout, top_k, count, checkpoint),
        Command::Ablate { grid, variants } => cmd_ablate(&cfg, &layout, grid, variants),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_key_parses_typed_and_bare_values() {
        let mut t = toml::Table::new();
        set_key(&mut t, "train.epochs_total=4").unwrap();
        set_key(&mut t, "eval.split=val").unwrap();
        set_key(&mut t, "loss.beta=0.01").unwrap();
        assert_eq!(t["train"]["epochs_total"].as_integer(), Some(4));
        assert_eq!(t["eval"]["split"].as_str(), Some("val"));
        assert_eq!(t["loss"]["beta"].as_float(), Some(0.01));
        assert!(set_key(&mut t, "no-equals").is_err());
    }
}
