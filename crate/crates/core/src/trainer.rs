//! Training orchestration: stage 0 (masked-token pretraining of the text
//! stream, which stands in for a pretrained language model at desk scale),
//! then the two-stage schedule (stage 1: text frozen, stage 2: joint with
//! MLM), with AdamW, warmup + cosine learning rate, and the decaying
//! distillation weight λ.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, mask_all_selected, Corpus, MaskedText, Pair};
use crate::error::{Error, Result};
use crate::lexicon::{l2_normalize_rows, Lexicon};
use crate::model::{mlm_pretraining_groups, DualStreamModel, FreezeScope, ParamGroup, Stage};
use crate::objectives::{
    distill_kl, flops_loss, lambda_at, lexicon_objective, mlm_loss, nce_unchecked, total_loss, Branch,
    LambdaSchedule, LossConfig, LossRecord, SimilarityBundle,
};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::seed;

/// Which steps λ decays over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpan {
    /// Linear 1 → 0 over every step of stages 1 and 2.
    #[default]
    AllStages,
    /// λ = 1 throughout stage 1, then 1 → 0 over stage 2.
    Stage2Only,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_total: usize,
    /// Epochs `[0, epochs_stage1)` are stage 1.
    pub epochs_stage1: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub stage0_epochs: usize,
    pub stage0_lr_peak: f64,
    /// Weight of the stage-0 reconstruction term: unmasked content positions
    /// predict their own token. 0 gives plain MLM.
    pub stage0_identity_weight: f64,
    pub mask_ratio: f64,
    /// Freeze the text side during stage 1 (Table 4 "freezing").
    pub freeze_text: bool,
    pub freeze_scope: FreezeScope,
    /// Add MLM to the lexicon objective in stage 2 (Table 4 "MLM").
    pub use_mlm: bool,
    /// Latent → lexicon similarity distillation (Table 5 "distillation").
    pub use_distill: bool,
    /// Whether distillation is also active during stage 1.
    pub distill_in_stage1: bool,
    pub lambda_span: LambdaSpan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 10,
            epochs_stage1: 3,
            batch_size: 32,
            lr_peak: 1e-3,
            warmup_epochs: 1,
            weight_decay: 0.05,
            grad_clip: 1.0,
            seed: 0,
            stage0_epochs: 40,
            stage0_lr_peak: 1e-3,
            stage0_identity_weight: 1.0,
            mask_ratio: 0.15,
            freeze_text: true,
            freeze_scope: FreezeScope::TextStream,
            use_mlm: true,
            use_distill: true,
            distill_in_stage1: true,
            lambda_span: LambdaSpan::AllStages,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs_total == 0 {
            return bad("epochs_total must be >= 1".into());
        }
        if self.epochs_stage1 > self.epochs_total {
            return bad(format!("epochs_stage1 {} > epochs_total {}", self.epochs_stage1, self.epochs_total));
        }
        if self.warmup_epochs > self.epochs_total {
            return bad("warmup_epochs > epochs_total".into());
        }
        if !(self.lr_peak > 0.0 && self.stage0_lr_peak > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.stage0_identity_weight >= 0.0) {
            return bad("weight_decay, grad_clip and stage0_identity_weight must be >= 0".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        (train_len / self.batch_size) as u64
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub loss: LossRecord,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates completed.
    pub step: u64,
    pub epoch: usize,
    pub stage: u8,
    /// All randomness is a pure function of this seed and the step index.
    pub seed: u64,
    pub clip_events: u64,
    pub history: Vec<StepRecord>,
}

pub fn write_loss_log<W: Write>(records: &[StepRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn masked_slots(masked: &[MaskedText]) -> (Vec<(usize, usize)>, Vec<u32>) {
    let mut slots = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in masked.iter().enumerate() {
        for (&p, &t) in m.mask_positions.iter().zip(&m.targets) {
            slots.push((b, p));
            targets.push(t);
        }
    }
    (slots, targets)
}

/// Content positions left intact by masking, with their own token as target.
fn unmasked_slots(masked: &[MaskedText]) -> (Vec<(usize, usize)>, Vec<u32>) {
    let mut slots = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in masked.iter().enumerate() {
        for (p, &t) in m.token_ids.iter().enumerate().skip(1) {
            if !m.mask_positions.contains(&p) {
                slots.push((b, p));
                targets.push(t);
            }
        }
    }
    (slots, targets)
}

fn token_ids(masked: &[MaskedText]) -> Vec<&[u32]> {
    masked.iter().map(|m| m.token_ids.as_slice()).collect()
}

/// Clip, then apply one AdamW update to the currently trainable parameters.
fn apply_update(model: &DualStreamModel, opt: &mut AdamW, loss: &Tensor, lr: f64, clip: f64) -> Result<(f64, bool)> {
    let grads = loss.backward()?;
    let norm = AdamW::grad_norm(model.trainable(), &grads)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite(0));
    }
    let clipped = clip > 0.0 && norm > clip;
    let scale = if clipped { clip / norm } else { 1.0 };
    opt.step(model.trainable(), &grads, lr, scale)?;
    Ok((norm, clipped))
}

// ---- stage 0 ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage0Point {
    /// Optimizer steps completed when measured.
    pub step: u64,
    pub val_mlm_loss: f64,
    pub val_masked_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage0Report {
    pub steps: u64,
    /// Per-step masked-token loss (the reconstruction term excluded).
    pub train_losses: Vec<f64>,
    /// Measured before training and after every epoch.
    pub eval_points: Vec<Stage0Point>,
    pub masked_accuracy: f64,
    pub self_top1: f64,
    pub self_top5: f64,
    pub clip_events: u64,
}

const EVAL_CHUNK: usize = 128;

fn eval_masks(pairs: &[Pair], ratio: f64, seed_: u64) -> Result<Vec<MaskedText>> {
    pairs
        .iter()
        .map(|p| mask_all_selected(&p.text, ratio, seed_))
        .collect()
}

/// Held-out masked-token loss and top-1 accuracy. Every selected position is
/// replaced by `[MASK]`, so the prediction has to come from context.
pub fn masked_token_eval(model: &DualStreamModel, pairs: &[Pair], ratio: f64, seed_: u64) -> Result<(f64, f64)> {
    let masks = eval_masks(pairs, ratio, seed_)?;
    let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
    for chunk in masks.chunks(EVAL_CHUNK) {
        let batch = model.token_batch(&token_ids(chunk))?;
        let logits = model.text_lexicon_logits(&batch)?.detach();
        let (slots, targets) = masked_slots(chunk);
        let rows = DualStreamModel::gather_positions(&logits, &slots)?;
        loss_sum += scalar(&mlm_loss(&rows, &targets)?)? * targets.len() as f64;
        let pred: Vec<u32> = rows.argmax(D::Minus1)?.to_vec1()?;
        correct += pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
        total += targets.len();
    }
    if total == 0 {
        return Err(Error::Empty("no masked positions in evaluation split"));
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

pub fn masked_token_accuracy(model: &DualStreamModel, pairs: &[Pair], ratio: f64, seed_: u64) -> Result<f64> {
    Ok(masked_token_eval(model, pairs, ratio, seed_)?.1)
}

/// Fraction of content positions of unmasked captions whose own token's
/// dimension ranks within the top `k` of that position's projection.
pub fn self_dimension_rate(model: &DualStreamModel, pairs: &[Pair], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let texts: Vec<&[u32]> = chunk.iter().map(|p| p.text.token_ids.as_slice()).collect();
        let batch = model.token_batch(&texts)?;
        let logits = model.text_lexicon_logits(&batch)?.detach().to_dtype(DType::F32)?;
        let (b, l, w) = logits.dims3()?;
        let flat: Vec<f32> = logits.flatten_all()?.to_vec1()?;
        for (i, t) in texts.iter().enumerate() {
            for (p, &tok) in t.iter().enumerate().skip(1) {
                let row = &flat[(i * l + p) * w..(i * l + p + 1) * w];
                let own = row[tok as usize];
                // rank with ties resolved against the token (pessimistic)
                let above = row.iter().enumerate().filter(|&(j, &v)| j != tok as usize && v >= own).count();
                hits += usize::from(above < k);
                total += 1;
            }
        }
        debug_assert_eq!(b, texts.len());
    }
    if total == 0 {
        return Err(Error::Empty("no content tokens"));
    }
    Ok(hits as f64 / total as f64)
}

/// Masked-token pretraining of the text stem, text lexicon branch, shared
/// lexicon head and word embeddings. Every other parameter is frozen.
///
/// Besides the masked-token loss, unmasked content positions are trained to
/// predict their own token (weight `stage0_identity_weight`). A pretrained
/// language model's head has this self-prediction property; at desk scale
/// it has to be taught, and it is what makes max-pooled caption vectors
/// peak on the caption's own words.
pub fn run_stage0_mlm(model: &mut DualStreamModel, corpus: &Corpus, lexicon: &Lexicon, cfg: &TrainConfig) -> Result<Stage0Report> {
    cfg.validate()?;
    let train = &corpus.train;
    let val = if corpus.val.is_empty() { &corpus.test } else { &corpus.val };
    if val.is_empty() {
        return Err(Error::Empty("stage 0 needs held-out captions"));
    }
    let spe = cfg.steps_per_epoch(train.len());
    if spe == 0 {
        return Err(Error::Config(format!("train split of {} is smaller than batch size {}", train.len(), cfg.batch_size)));
    }
    let previous = model.frozen().clone();
    let frozen = ParamGroup::ALL.iter().copied().filter(|g| !mlm_pretraining_groups().contains(g)).collect();
    model.set_frozen(frozen);

    let total = spe * cfg.stage0_epochs as u64;
    let warmup = spe.min(total);
    let sched = if total > 0 { Some(LrSchedule::new(cfg.stage0_lr_peak, warmup, total)?) } else { None };
    let mut opt = AdamW::new(cfg.adamw());
    let eval_seed = seed::derive(cfg.seed, "stage0-eval", 0);
    let eval_point = |model: &DualStreamModel, step| -> Result<Stage0Point> {
        let (loss, acc) = masked_token_eval(model, val, cfg.mask_ratio, eval_seed)?;
        Ok(Stage0Point { step, val_mlm_loss: loss, val_masked_accuracy: acc })
    };
    let mut report = Stage0Report {
        steps: 0,
        train_losses: Vec::new(),
        eval_points: vec![eval_point(model, 0)?],
        masked_accuracy: 0.0,
        self_top1: 0.0,
        self_top5: 0.0,
        clip_events: 0,
    };
    let mut step = 0u64;
    for epoch in 0..cfg.stage0_epochs {
        let epoch_seed = seed::derive(cfg.seed, "stage0-epoch", epoch as u64);
        for batch in make_batches(train, lexicon, cfg.batch_size, cfg.mask_ratio, epoch_seed)? {
            let batch = batch?;
            let (slots, targets) = masked_slots(&batch.masked);
            if targets.is_empty() {
                return Err(Error::Empty("batch has no masked positions"));
            }
            let tb = model.token_batch(&token_ids(&batch.masked))?;
            let logits = model.text_lexicon_logits(&tb)?;
            let mlm = mlm_loss(&DualStreamModel::gather_positions(&logits, &slots)?, &targets)?;
            let (keep_slots, keep_targets) = unmasked_slots(&batch.masked);
            let loss = if cfg.stage0_identity_weight > 0.0 && !keep_targets.is_empty() {
                let identity = mlm_loss(&DualStreamModel::gather_positions(&logits, &keep_slots)?, &keep_targets)?;
                (&mlm + (identity * cfg.stage0_identity_weight)?)?
            } else {
                mlm.clone()
            };
            step += 1;
            let lr = sched.as_ref().map_or(0.0, |s| s.at(step));
            let (_, clipped) = apply_update(model, &mut opt, &loss, lr, cfg.grad_clip)?;
            report.clip_events += u64::from(clipped);
            report.train_losses.push(scalar(&mlm)?);
        }
        report.eval_points.push(eval_point(model, step)?);
    }
    report.steps = step;
    report.masked_accuracy = report.eval_points.last().map_or(0.0, |p| p.val_masked_accuracy);
    report.self_top1 = self_dimension_rate(model, val, 1)?;
    report.self_top5 = self_dimension_rate(model, val, 5)?;
    model.set_frozen(previous);
    Ok(report)
}

// ---- stages 1 and 2 --------------------------------------------------------

#[derive(Debug)]
pub struct Trainer<'a> {
    model: DualStreamModel,
    corpus: &'a Corpus,
    lexicon: &'a Lexicon,
    config: TrainConfig,
    loss: LossConfig,
    opt: AdamW,
    state: TrainState,
    steps_per_epoch: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: DualStreamModel, corpus: &'a Corpus, lexicon: &'a Lexicon, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        let state = TrainState { step: 0, epoch: 0, stage: 1, seed: config.seed, clip_events: 0, history: Vec::new() };
        let opt = AdamW::new(config.adamw());
        Self::assemble(model, corpus, lexicon, config, loss, opt, state)
    }

    fn assemble(
        model: DualStreamModel,
        corpus: &'a Corpus,
        lexicon: &'a Lexicon,
        config: TrainConfig,
        loss: LossConfig,
        opt: AdamW,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        if lexicon.len() != model.config().lexicon_size {
            return Err(Error::Config(format!(
                "lexicon has {} words but the model expects {}",
                lexicon.len(),
                model.config().lexicon_size
            )));
        }
        let steps_per_epoch = config.steps_per_epoch(corpus.train.len());
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "train split of {} is smaller than batch size {}",
                corpus.train.len(),
                config.batch_size
            )));
        }
        let mut trainer = Self { model, corpus, lexicon, config, loss, opt, state, steps_per_epoch };
        if trainer.state.step > trainer.total_steps() {
            return Err(Error::Checkpoint(format!(
                "resume step {} exceeds the {} steps of this schedule",
                trainer.state.step,
                trainer.total_steps()
            )));
        }
        trainer.sync_stage();
        Ok(trainer)
    }

    pub fn model(&self) -> &DualStreamModel {
        &self.model
    }

    pub fn into_model(self) -> DualStreamModel {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// `epochs_total × floor(|train| / B)`.
    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs_total as u64
    }

    pub fn stage1_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs_stage1 as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn stage_of_epoch(&self, epoch: usize) -> Stage {
        if epoch < self.config.epochs_stage1 {
            Stage::One
        } else {
            Stage::Two
        }
    }

    /// Align the freeze mask with the epoch the next step belongs to.
    fn sync_stage(&mut self) {
        let epoch = (self.state.step / self.steps_per_epoch) as usize;
        let epoch = epoch.min(self.config.epochs_total.saturating_sub(1));
        let stage = self.stage_of_epoch(epoch);
        if self.config.freeze_text {
            self.model.set_stage_with(stage, self.config.freeze_scope);
        } else {
            self.model.set_frozen(Default::default());
        }
        self.state.epoch = epoch;
        self.state.stage = stage.number();
    }

    /// λ for the 1-based step `step`.
    pub fn lambda(&self, step: u64) -> Result<f64> {
        match self.config.lambda_span {
            LambdaSpan::AllStages => lambda_at(step, &LambdaSchedule::decay(self.total_steps())),
            LambdaSpan::Stage2Only => {
                let s1 = self.stage1_steps();
                if step <= s1 || self.total_steps() == s1 {
                    Ok(1.0)
                } else {
                    lambda_at(step - s1, &LambdaSchedule::decay(self.total_steps() - s1))
                }
            }
        }
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        let warmup = self.steps_per_epoch * self.config.warmup_epochs as u64;
        Ok(LrSchedule::new(self.config.lr_peak, warmup, self.total_steps())?.at(step))
    }

    /// Run one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::Config("training schedule already complete".into()));
        }
        self.sync_stage();
        let epoch = self.state.epoch;
        let stage = self.stage_of_epoch(epoch);
        let index = (self.state.step % self.steps_per_epoch) as usize;
        let epoch_seed = seed::derive(self.config.seed, "epoch", epoch as u64);
        let batches = make_batches(&self.corpus.train, self.lexicon, self.config.batch_size, self.config.mask_ratio, epoch_seed)?;
        let batch = batches.get(index)?;

        let m = &self.model;
        let videos = m.forward_videos(&batch.videos)?;
        let tb = m.token_batch(&batch.texts.iter().map(|t| t.token_ids.as_slice()).collect::<Vec<_>>())?;
        let mut texts = m.forward_texts(&tb)?;
        if !m.text_trainable() {
            texts = texts.detach();
        }
        let tau = self.loss.tau;
        let (v_lat, t_lat) = (l2_normalize_rows(&videos.f_lat)?, l2_normalize_rows(&texts.f_lat)?);
        let (v_lex, t_lex) = (l2_normalize_rows(&videos.f_lex)?, l2_normalize_rows(&texts.f_lex)?);
        // An all-zero lexicon vector stays zero after clamped normalisation,
        // so the unchecked NCE is used here; inputs are unit rows otherwise.
        let vtc_lat = nce_unchecked(&v_lat, &t_lat, tau)?;
        let vtc_lex = nce_unchecked(&v_lex, &t_lex, tau)?;
        let flops = flops_loss(&videos.f_lex, &texts.f_lex)?;

        let mlm = if stage == Stage::Two && self.config.use_mlm {
            let (slots, targets) = masked_slots(&batch.masked);
            let mb = m.token_batch(&token_ids(&batch.masked))?;
            let logits = m.text_lexicon_logits(&mb)?;
            Some(mlm_loss(&DualStreamModel::gather_positions(&logits, &slots)?, &targets)?)
        } else {
            None
        };
        let distill_on = self.config.use_distill && (stage == Stage::Two || self.config.distill_in_stage1);
        let distill = if distill_on {
            let lex = SimilarityBundle::from_embeddings(&v_lex, &t_lex, Branch::Lexicon)?;
            let lat = SimilarityBundle::from_embeddings(&v_lat, &t_lat, Branch::Latent)?;
            distill_kl(&lex, &lat, self.loss.distill_tau)?
        } else {
            vtc_lat.zeros_like()?
        };

        let step = self.state.step + 1;
        let lambda = self.lambda(step)?;
        let lr = self.lr(step)?;
        let lex_obj = lexicon_objective(stage, &vtc_lex, &flops, mlm.as_ref(), self.loss.beta)?;
        let total = total_loss(&lex_obj, &vtc_lat, &distill, lambda)?;
        let total_value = scalar(&total)?;
        if !total_value.is_finite() {
            return Err(Error::NonFinite(step as usize));
        }
        let (grad_norm, clipped) = apply_update(&self.model, &mut self.opt, &total, lr, self.config.grad_clip)?;

        let record = StepRecord {
            loss: LossRecord {
                step,
                stage: stage.number(),
                vtc_lat: scalar(&vtc_lat)?,
                vtc_lex: scalar(&vtc_lex)?,
                mlm: mlm.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
                flops: scalar(&flops)?,
                distill: scalar(&distill)?,
                lambda,
                total: total_value,
            },
            epoch,
            lr,
            grad_norm,
            clipped,
        };
        self.state.step = step;
        self.state.clip_events += u64::from(clipped);
        self.state.history.push(record.clone());
        if !self.is_finished() {
            self.sync_stage();
        }
        Ok(record)
    }

    /// Step until `target` updates are done (capped at the schedule length).
    /// With `checkpoint_dir`, a checkpoint is written at each epoch end.
    pub fn run_until(&mut self, target: u64, checkpoint_dir: Option<&Path>) -> Result<()> {
        let target = target.min(self.total_steps());
        while self.state.step < target {
            self.step()?;
            if self.state.step % self.steps_per_epoch == 0 {
                if let Some(dir) = checkpoint_dir {
                    let epoch = self.state.step / self.steps_per_epoch;
                    self.save(&Self::epoch_checkpoint(dir, epoch))?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<()> {
        self.run_until(self.total_steps(), checkpoint_dir)
    }

    /// Path of the checkpoint written after `epochs_done` epochs.
    pub fn epoch_checkpoint(dir: &Path, epochs_done: u64) -> PathBuf {
        dir.join(format!("epoch-{epochs_done:03}.safetensors"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save_checkpoint(
            &self.model,
            &crate::checkpoint::CheckpointMeta {
                train: Some(self.config.clone()),
                loss: Some(self.loss.clone()),
                state: Some(self.state.clone()),
            },
            Some(&self.opt),
            path,
        )
    }

    /// Continue a run from a checkpoint written by [`Trainer::save`]. The
    /// stored training and loss configuration must match `config`/`loss`.
    pub fn resume(path: &Path, corpus: &'a Corpus, lexicon: &'a Lexicon, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        let ck = crate::checkpoint::load_checkpoint(path)?;
        let state = ck.meta.state.ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        if ck.meta.train.as_ref() != Some(&config) {
            return Err(Error::Checkpoint(format!(
                "training config differs from the checkpoint's: stored {:?}, requested {:?}",
                ck.meta.train, config
            )));
        }
        if ck.meta.loss.as_ref() != Some(&loss) {
            return Err(Error::Checkpoint("loss config differs from the checkpoint's".into()));
        }
        if state.history.len() as u64 != state.step {
            return Err(Error::Checkpoint(format!(
                "step mismatch: state at step {} but {} logged steps",
                state.step,
                state.history.len()
            )));
        }
        let opt = ck.optimizer.unwrap_or_else(|| AdamW::new(config.adamw()));
        Self::assemble(ck.model, corpus, lexicon, config, loss, opt, state)
    }
}
