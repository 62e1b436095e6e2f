//! Dual-stream encoder: per modality a shared stem, a latent branch and a
//! lexicon branch; per-modality latent heads and one lexicon head shared by
//! both modalities, whose output weight is the word embedding table.

mod layers;
mod params;

use std::collections::BTreeSet;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, VideoSample};
use crate::error::{shape_err, Error, Result};
use crate::lexicon::{self, LatentVector, LexiconVector, PoolMode, TokenProjection, CLS, PAD};

pub(crate) use layers::log_softmax_last;
use layers::{Block, LayerNorm, Linear};
pub use params::{Param, ParamGroup, ParamStore};
use params::Init;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Blocks shared by the latent and lexicon branches of a stream (N).
    pub stem_blocks: usize,
    /// Blocks in each representation-specific branch (M).
    pub specific_blocks: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lexicon_size: usize,
    /// Background symbols plus concept glyphs.
    pub num_symbols: usize,
    pub frames: usize,
    pub patches_per_frame: usize,
    pub max_len: usize,
    pub pool: PoolMode,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn desk_default(lexicon_size: usize, num_symbols: usize, data: &DataConfig) -> Self {
        Self {
            stem_blocks: 3,
            specific_blocks: 1,
            hidden: 64,
            latent_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            lexicon_size,
            num_symbols,
            frames: data.frames,
            patches_per_frame: data.patches_per_frame,
            max_len: data.max_len,
            pool: PoolMode::Max,
            init_std: 0.02,
        }
    }

    pub fn positions(&self) -> usize {
        self.frames * self.patches_per_frame
    }

    pub fn depth(&self) -> usize {
        self.stem_blocks + self.specific_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth() == 0 {
            return bad("encoder needs at least one block");
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden width must be divisible by heads");
        }
        if self.latent_dim < 2 {
            return bad("latent_dim must be >= 2");
        }
        if self.lexicon_size < 4 {
            return bad("lexicon must hold the reserved tokens plus at least one word");
        }
        if self.positions() == 0 || self.max_len < 2 || self.num_symbols == 0 || self.mlp_ratio == 0 {
            return bad("frames, patches, max_len, symbols and mlp_ratio must be positive");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Text stream frozen; video grounded into the lexicon space.
    One,
    /// Everything trainable.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

/// What stage 1 freezes on the text side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    /// The whole text stream plus the shared lexicon head and word table.
    #[default]
    TextStream,
    /// Only what feeds text lexicon vectors; the text latent branch and its
    /// head stay trainable.
    TextLexiconPath,
}

impl FreezeScope {
    pub fn groups(self) -> BTreeSet<ParamGroup> {
        use ParamGroup::*;
        match self {
            FreezeScope::TextStream => [TextEmbed, TextStem, TextLatent, TextLexicon, TextLatentHead, LexiconHead, WordEmbeddings].into(),
            FreezeScope::TextLexiconPath => [TextEmbed, TextStem, TextLexicon, LexiconHead, WordEmbeddings].into(),
        }
    }
}

/// Groups updated by text-only masked-language-model pretraining.
pub fn mlm_pretraining_groups() -> BTreeSet<ParamGroup> {
    use ParamGroup::*;
    [TextEmbed, TextStem, TextLexicon, LexiconHead, WordEmbeddings].into()
}

/// Dense + GELU + LayerNorm, then a decoder tied to the word table.
#[derive(Debug)]
pub struct LexiconHead {
    dense: Linear,
    norm: LayerNorm,
    decoder: Linear,
}

impl LexiconHead {
    fn new(store: &mut ParamStore, word_embeddings: &Tensor, d: usize, w: usize, std: f64) -> Result<Self> {
        let g = ParamGroup::LexiconHead;
        let dense = Linear::new(store, g, "dense", d, d, std)?;
        let norm = LayerNorm::new(store, g, "norm", d)?;
        let bias = store.create(g, "decoder.bias", &[w], Init::Zeros)?;
        Ok(Self { dense, norm, decoder: Linear::from_parts(word_embeddings.clone(), Some(bias)) })
    }

    /// `(…, d)` raw lexicon features to `(…, |W|)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.dense.forward(x)?.gelu()?)?;
        self.decoder.forward(&h)
    }
}

#[derive(Debug)]
struct Stream {
    stem: Vec<Block>,
    latent: Vec<Block>,
    lexicon: Vec<Block>,
    latent_norm: LayerNorm,
    lexicon_norm: LayerNorm,
    latent_head: Linear,
    lexicon_head: Arc<LexiconHead>,
}

struct StreamGroups {
    stem: ParamGroup,
    latent: ParamGroup,
    lexicon: ParamGroup,
    latent_head: ParamGroup,
}

impl Stream {
    fn new(store: &mut ParamStore, g: StreamGroups, cfg: &EncoderConfig, lexicon_head: Arc<LexiconHead>) -> Result<Self> {
        let (d, h, r, std) = (cfg.hidden, cfg.heads, cfg.mlp_ratio, cfg.init_std);
        let blocks = |store: &mut ParamStore, group: ParamGroup, n: usize| -> Result<Vec<Block>> {
            (0..n).map(|i| Block::new(store, group, &format!("block{i}"), d, h, r, std)).collect()
        };
        Ok(Self {
            stem: blocks(store, g.stem, cfg.stem_blocks)?,
            latent: blocks(store, g.latent, cfg.specific_blocks)?,
            lexicon: blocks(store, g.lexicon, cfg.specific_blocks)?,
            latent_norm: LayerNorm::new(store, g.latent, "norm", d)?,
            lexicon_norm: LayerNorm::new(store, g.lexicon, "norm", d)?,
            latent_head: Linear::new(store, g.latent_head, "proj", d, cfg.latent_dim, std)?,
            lexicon_head,
        })
    }

    fn run(blocks: &[Block], mut x: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        for b in blocks {
            x = b.forward(&x, bias)?;
        }
        Ok(x)
    }

    fn stem(&self, x: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Self::run(&self.stem, x, bias)
    }

    /// `[CLS]` feature through the latent branch and head: `(B, d̂)`.
    fn latent(&self, stem_out: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = Self::run(&self.latent, stem_out.clone(), bias)?;
        let cls = h.narrow(1, 0, 1)?.squeeze(1)?;
        self.latent_head.forward(&self.latent_norm.forward(&cls)?)
    }

    /// Per-position lexicon logits `(B, L, |W|)`.
    fn lexicon(&self, stem_out: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = Self::run(&self.lexicon, stem_out.clone(), bias)?;
        self.lexicon_head.forward(&self.lexicon_norm.forward(&h)?)
    }
}

/// Batched encoder output.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    /// `(B, d̂)`
    pub f_lat: Tensor,
    /// `(B, L, |W|)` raw logits; for video `L = K` local positions.
    pub p_lex: Tensor,
    /// `(B, |W|)` pooled, nonnegative.
    pub f_lex: Tensor,
    /// `(B, L)` 1 where a position takes part in pooling.
    pub keep: Tensor,
}

impl StreamOutput {
    pub fn detach(&self) -> Self {
        Self {
            f_lat: self.f_lat.detach(),
            p_lex: self.p_lex.detach(),
            f_lex: self.f_lex.detach(),
            keep: self.keep.clone(),
        }
    }
}

/// Padded token batch.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(B, max_len)` u32
    pub ids: Tensor,
    /// `(B, max_len)` f32; content tokens only (no `[CLS]`, no padding).
    pub keep: Tensor,
    /// `(B, 1, 1, max_len)` additive attention mask over keys.
    pub attn_bias: Tensor,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoding {
    pub f_lat: LatentVector,
    pub p_lex: TokenProjection,
    pub f_lex: LexiconVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub f_lat: LatentVector,
    /// One row per real token, `[CLS]` first.
    pub p_lex: TokenProjection,
    pub f_lex: LexiconVector,
}

#[derive(Debug)]
pub struct DualStreamModel {
    config: EncoderConfig,
    store: ParamStore,
    symbol_embed: Tensor,
    video_cls: Tensor,
    video_pos: Tensor,
    text_pos: Tensor,
    word_embeddings: Tensor,
    lexicon_head: Arc<LexiconHead>,
    video: Stream,
    text: Stream,
    frozen: BTreeSet<ParamGroup>,
    device: Device,
}

impl DualStreamModel {
    /// Fresh model; every weight is truncated normal with `config.init_std`,
    /// drawn from a stream keyed by `(seed, parameter name)`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut store = ParamStore::new(seed, device.clone());
        let (d, std) = (config.hidden, config.init_std);
        let tn = Init::TruncNormal(std);

        let word_embeddings = store.create(ParamGroup::WordEmbeddings, "table", &[config.lexicon_size, d], tn)?;
        let lexicon_head = Arc::new(LexiconHead::new(&mut store, &word_embeddings, d, config.lexicon_size, std)?);

        let symbol_embed = store.create(ParamGroup::VideoEmbed, "symbols", &[config.num_symbols, d], tn)?;
        let video_cls = store.create(ParamGroup::VideoEmbed, "cls", &[1, 1, d], tn)?;
        let video_pos = store.create(ParamGroup::VideoEmbed, "pos", &[1 + config.positions(), d], tn)?;
        let video = Stream::new(
            &mut store,
            StreamGroups {
                stem: ParamGroup::VideoStem,
                latent: ParamGroup::VideoLatent,
                lexicon: ParamGroup::VideoLexicon,
                latent_head: ParamGroup::VideoLatentHead,
            },
            &config,
            Arc::clone(&lexicon_head),
        )?;

        let text_pos = store.create(ParamGroup::TextEmbed, "pos", &[config.max_len, d], tn)?;
        let text = Stream::new(
            &mut store,
            StreamGroups {
                stem: ParamGroup::TextStem,
                latent: ParamGroup::TextLatent,
                lexicon: ParamGroup::TextLexicon,
                latent_head: ParamGroup::TextLatentHead,
            },
            &config,
            Arc::clone(&lexicon_head),
        )?;

        Ok(Self {
            config,
            store,
            symbol_embed,
            video_cls,
            video_pos,
            text_pos,
            word_embeddings,
            lexicon_head,
            video,
            text,
            frozen: BTreeSet::new(),
            device,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// The lexicon head as seen from one modality's stream.
    pub fn lexicon_head(&self, modality: Modality) -> &Arc<LexiconHead> {
        match modality {
            Modality::Video => &self.video.lexicon_head,
            Modality::Text => &self.text.lexicon_head,
        }
    }

    pub fn word_embeddings(&self) -> &Tensor {
        &self.word_embeddings
    }

    /// Output weight of the shared lexicon head.
    pub fn lexicon_decoder_weight(&self) -> &Tensor {
        self.lexicon_head.decoder.weight()
    }

    /// Exhaustive, disjoint parameter counts per group.
    pub fn parameter_groups(&self) -> Vec<(ParamGroup, usize)> {
        self.store.group_counts()
    }

    pub fn frozen(&self) -> &BTreeSet<ParamGroup> {
        &self.frozen
    }

    pub fn is_frozen(&self, g: ParamGroup) -> bool {
        self.frozen.contains(&g)
    }

    pub fn set_frozen(&mut self, groups: BTreeSet<ParamGroup>) {
        self.frozen = groups;
    }

    pub fn set_stage(&mut self, stage: Stage) -> &BTreeSet<ParamGroup> {
        self.set_stage_with(stage, FreezeScope::TextStream)
    }

    pub fn set_stage_with(&mut self, stage: Stage, scope: FreezeScope) -> &BTreeSet<ParamGroup> {
        self.frozen = match stage {
            Stage::One => scope.groups(),
            Stage::Two => BTreeSet::new(),
        };
        &self.frozen
    }

    /// Whether any text-stream gradient is wanted under the current mask.
    pub fn text_trainable(&self) -> bool {
        ParamGroup::ALL.iter().any(|g| (g.is_text() || *g == ParamGroup::WordEmbeddings) && !self.is_frozen(*g))
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.store.params().iter().filter(|p| !self.frozen.contains(&p.group))
    }

    // ---- batching -------------------------------------------------------

    pub fn video_ids(&self, videos: &[VideoSample]) -> Result<Tensor> {
        let (f, p) = (self.config.frames, self.config.patches_per_frame);
        let mut ids = Vec::with_capacity(videos.len() * f * p);
        for v in videos {
            if v.frames.len() != f || v.frames.iter().any(|fr| fr.len() != p) {
                let got = format!("{}x{:?}", v.frames.len(), v.frames.iter().map(Vec::len).collect::<Vec<_>>());
                return Err(shape_err("video frames", format!("{f}x{p}"), got));
            }
            for s in v.symbols() {
                if s as usize >= self.config.num_symbols {
                    return Err(shape_err("video symbol", format!("< {}", self.config.num_symbols), s));
                }
                ids.push(s);
            }
        }
        Ok(Tensor::from_vec(ids, (videos.len(), f * p), &self.device)?)
    }

    pub fn token_batch<S: AsRef<[u32]>>(&self, texts: &[S]) -> Result<TokenBatch> {
        let l = self.config.max_len;
        let w = self.config.lexicon_size;
        let b = texts.len();
        let mut ids = vec![PAD as u32; b * l];
        let mut keep = vec![0f32; b * l];
        let mut bias = vec![-1e9f32; b * l];
        let mut lengths = Vec::with_capacity(b);
        for (i, t) in texts.iter().enumerate() {
            let t = t.as_ref();
            if t.len() > l {
                return Err(shape_err("caption length", format!("<= {l}"), t.len()));
            }
            if t.len() < 2 {
                return Err(Error::Empty("caption has no content tokens"));
            }
            if t[0] != CLS as u32 {
                return Err(Error::Config("caption must start with [CLS]".into()));
            }
            for (j, &tok) in t.iter().enumerate() {
                if tok as usize >= w {
                    return Err(Error::TargetOutOfRange { target: tok as usize, size: w });
                }
                ids[i * l + j] = tok;
                bias[i * l + j] = 0.0;
                if j > 0 {
                    keep[i * l + j] = 1.0;
                }
            }
            lengths.push(t.len());
        }
        Ok(TokenBatch {
            ids: Tensor::from_vec(ids, (b, l), &self.device)?,
            keep: Tensor::from_vec(keep, (b, l), &self.device)?,
            attn_bias: Tensor::from_vec(bias, (b, 1, 1, l), &self.device)?,
            lengths,
            max_len: l,
        })
    }

    // ---- forward --------------------------------------------------------

    fn video_input(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, k) = ids.dims2()?;
        let d = self.config.hidden;
        let patches = self.symbol_embed.index_select(&ids.flatten_all()?, 0)?.reshape((b, k, d))?;
        let cls = self.video_cls.broadcast_as((b, 1, d))?;
        Ok(Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.video_pos)?)
    }

    fn text_input(&self, batch: &TokenBatch) -> Result<Tensor> {
        let (b, l) = batch.ids.dims2()?;
        let tok = self
            .word_embeddings
            .index_select(&batch.ids.flatten_all()?, 0)?
            .reshape((b, l, self.config.hidden))?;
        Ok(tok.broadcast_add(&self.text_pos)?)
    }

    pub fn forward_videos(&self, videos: &[VideoSample]) -> Result<StreamOutput> {
        let ids = self.video_ids(videos)?;
        let k = self.config.positions();
        let stem = self.video.stem(self.video_input(&ids)?, None)?;
        let f_lat = self.video.latent(&stem, None)?;
        let p_lex = self.video.lexicon(&stem, None)?.narrow(1, 1, k)?;
        let keep = Tensor::ones((videos.len(), k), DType::F32, &self.device)?;
        let f_lex = lexicon::aggregate_tensor(&p_lex, &keep, self.config.pool)?;
        Ok(StreamOutput { f_lat, p_lex, f_lex, keep })
    }

    pub fn forward_texts(&self, batch: &TokenBatch) -> Result<StreamOutput> {
        let bias = Some(&batch.attn_bias);
        let stem = self.text.stem(self.text_input(batch)?, bias)?;
        let f_lat = self.text.latent(&stem, bias)?;
        let p_lex = self.text.lexicon(&stem, bias)?;
        let f_lex = lexicon::aggregate_tensor(&p_lex, &batch.keep, self.config.pool)?;
        Ok(StreamOutput { f_lat, p_lex, f_lex, keep: batch.keep.clone() })
    }

    /// Lexicon logits only (skips the latent branch), `(B, L, |W|)`.
    pub fn text_lexicon_logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let bias = Some(&batch.attn_bias);
        let stem = self.text.stem(self.text_input(batch)?, bias)?;
        self.text.lexicon(&stem, bias)
    }

    /// Rows of `logits` (`(B, L, |W|)`) at the given `(batch, position)` slots.
    pub fn gather_positions(logits: &Tensor, slots: &[(usize, usize)]) -> Result<Tensor> {
        let (b, l, w) = logits.dims3()?;
        let rows: Vec<u32> = slots
            .iter()
            .map(|&(i, p)| {
                if i >= b || p >= l {
                    Err(shape_err("masked slot", format!("< ({b}, {l})"), format!("({i}, {p})")))
                } else {
                    Ok((i * l + p) as u32)
                }
            })
            .collect::<Result<_>>()?;
        let idx = Tensor::from_vec(rows, slots.len(), logits.device())?;
        Ok(logits.reshape((b * l, w))?.index_select(&idx, 0)?)
    }

    // ---- host-side encodings --------------------------------------------

    pub fn encode_videos(&self, videos: &[VideoSample]) -> Result<Vec<VideoEncoding>> {
        let out = self.forward_videos(videos)?.detach();
        let f_lat = to_rows(&out.f_lat)?;
        let p_lex = to_rows3(&out.p_lex)?;
        let (k, w) = (self.config.positions(), self.config.lexicon_size);
        f_lat
            .into_iter()
            .zip(p_lex)
            .map(|(lat, lex)| {
                let p_lex = TokenProjection::new(k, w, lex)?;
                let f_lex = lexicon::aggregate(&p_lex, self.config.pool)?;
                Ok(VideoEncoding { f_lat: LatentVector::new(lat)?, p_lex, f_lex })
            })
            .collect()
    }

    pub fn encode_video(&self, video: &VideoSample) -> Result<VideoEncoding> {
        Ok(self.encode_videos(std::slice::from_ref(video))?.remove(0))
    }

    /// Accepts plain or masked captions (any `[CLS]`-led token id sequence).
    pub fn encode_texts<S: AsRef<[u32]>>(&self, texts: &[S]) -> Result<Vec<TextEncoding>> {
        let batch = self.token_batch(texts)?;
        let out = self.forward_texts(&batch)?.detach();
        let f_lat = to_rows(&out.f_lat)?;
        let p_lex = to_rows3(&out.p_lex)?;
        let (l, w) = (self.config.max_len, self.config.lexicon_size);
        f_lat
            .into_iter()
            .zip(p_lex)
            .zip(&batch.lengths)
            .map(|((lat, lex), &n)| {
                let rows = lex[..n * w].to_vec();
                debug_assert_eq!(lex.len(), l * w);
                let p_lex = TokenProjection::new(n, w, rows)?;
                let content = TokenProjection::new(n - 1, w, lex[w..n * w].to_vec())?;
                let f_lex = lexicon::aggregate(&content, self.config.pool)?;
                Ok(TextEncoding { f_lat: LatentVector::new(lat)?, p_lex, f_lex })
            })
            .collect()
    }

    pub fn encode_text(&self, token_ids: &[u32]) -> Result<TextEncoding> {
        Ok(self.encode_texts(&[token_ids])?.remove(0))
    }
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

fn to_rows3(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let b = t.dim(0)?;
    Ok(t.to_dtype(DType::F64)?.reshape((b, ()))?.to_vec2()?)
}
