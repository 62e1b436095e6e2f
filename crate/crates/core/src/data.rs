//! Synthetic concept-grounded video/caption corpus.
//!
//! A scene is a small set of concepts (objects, actions, attributes). Its
//! video is a grid of glyph symbols, one glyph per concept plus background
//! noise; its caption is a template sentence naming every concept once.
//! Objects carry seeded compatibility lists for actions and attributes, so a
//! masked concept word is partly predictable from the rest of the caption.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, WordKind, CLS, MASK};
use crate::seed;

/// Template filler words. They are lexicon dimensions but not concepts.
pub const FUNCTION_WORDS: &[&str] = &["a", "the", "video", "clip", "of", "there", "is", "with", "and", "near"];

pub const OBJECTS: &[&str] = &[
    "dog", "cat", "horse", "bird", "fish", "car", "bike", "boat", "train", "plane", "man", "woman", "child",
    "ball", "guitar", "piano", "cake", "pumpkin", "tree", "flower", "kite", "umbrella", "phone", "book",
];
pub const ACTIONS: &[&str] = &[
    "running", "jumping", "swimming", "flying", "eating", "sleeping", "playing", "riding", "singing",
    "dancing", "cooking", "reading", "driving", "climbing", "throwing", "walking",
];
pub const ATTRIBUTES: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "small", "large", "old", "young", "happy", "wooden",
    "shiny", "striped", "wet", "furry",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Object,
    Action,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub word: String,
    pub glyph: u32,
    pub category: Category,
}

/// Concepts available to the generator. Glyph ids start after the
/// background symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPool {
    pub concepts: Vec<Concept>,
    pub num_background: u32,
}

impl ConceptPool {
    pub fn from_words(objects: &[&str], actions: &[&str], attributes: &[&str], num_background: u32) -> Self {
        let tagged = objects
            .iter()
            .map(|w| (w, Category::Object))
            .chain(actions.iter().map(|w| (w, Category::Action)))
            .chain(attributes.iter().map(|w| (w, Category::Attribute)));
        let concepts = tagged
            .enumerate()
            .map(|(i, (w, category))| Concept {
                word: w.to_string(),
                glyph: num_background + i as u32,
                category,
            })
            .collect();
        Self { concepts, num_background }
    }

    /// 24 objects, 16 actions, 16 attributes.
    pub fn desk_default() -> Self {
        Self::from_words(OBJECTS, ACTIONS, ATTRIBUTES, 4)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Number of distinct video symbols (background + glyphs).
    pub fn num_symbols(&self) -> usize {
        self.num_background as usize + self.concepts.len()
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        let words: Vec<&str> = self.concepts.iter().map(|c| c.word.as_str()).collect();
        Lexicon::new(FUNCTION_WORDS, &words)
    }

    fn of(&self, cat: Category) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.concepts[i].category == cat).collect()
    }

    pub fn validate(&self, max_per_scene: usize) -> Result<()> {
        if self.len() < max_per_scene || self.len() < 20 {
            return Err(Error::Config(format!(
                "concept pool has {} concepts; need >= 20 and >= {max_per_scene} per scene",
                self.len()
            )));
        }
        if self.of(Category::Object).is_empty() {
            return Err(Error::Config("concept pool has no objects".into()));
        }
        let glyphs: BTreeSet<u32> = self.concepts.iter().map(|c| c.glyph).collect();
        if glyphs.len() != self.len() || glyphs.iter().any(|&g| g < self.num_background) {
            return Err(Error::Config("concept glyphs must be unique and above background ids".into()));
        }
        let words: BTreeSet<&str> = self.concepts.iter().map(|c| c.word.as_str()).collect();
        if words.len() != self.len() {
            return Err(Error::Config("concept words must be unique".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_scenes: usize,
    pub frames: usize,
    pub patches_per_frame: usize,
    pub max_len: usize,
    pub min_concepts: usize,
    pub max_concepts: usize,
    /// Probability that a scene concept is drawn in any given frame.
    pub glyph_presence: f64,
    pub actions_per_object: usize,
    pub attributes_per_object: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_scenes: 2500,
            frames: 2,
            patches_per_frame: 8,
            max_len: 16,
            min_concepts: 2,
            max_concepts: 5,
            glyph_presence: 0.75,
            actions_per_object: 3,
            attributes_per_object: 3,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn positions(&self) -> usize {
        self.frames * self.patches_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_scenes < 10 {
            return bad(format!("num_scenes must be >= 10, got {}", self.num_scenes));
        }
        if !(2..=5).contains(&self.min_concepts) || self.min_concepts > self.max_concepts || self.max_concepts > 5 {
            return bad("concepts per scene must satisfy 2 <= min <= max <= 5".into());
        }
        if self.frames == 0 || self.patches_per_frame < self.max_concepts {
            return bad("every frame must fit all scene glyphs (patches_per_frame >= max_concepts)".into());
        }
        // [CLS] + prefix(3) + two determiners + "with" + concepts
        if self.max_len < 7 + self.max_concepts {
            return bad(format!("max_len must be >= {}", 7 + self.max_concepts));
        }
        if !(0.0..=1.0).contains(&self.glyph_presence) {
            return bad("glyph_presence must be a probability".into());
        }
        if self.actions_per_object == 0 || self.attributes_per_object < 2 {
            return bad("objects need >= 1 compatible action and >= 2 attributes".into());
        }
        let f = self.train_fraction + self.val_fraction;
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && f < 1.0) {
            return bad("split fractions must leave a nonempty test split".into());
        }
        Ok(())
    }

    /// Scene counts of the (train, val, test) splits.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_scenes;
        let train = (n as f64 * self.train_fraction).round() as usize;
        let val = (n as f64 * self.val_fraction).round() as usize;
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    /// Concept words, in caption order.
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSample {
    pub scene_id: u64,
    /// `frames × patches` symbol ids.
    pub frames: Vec<Vec<u32>>,
}

impl VideoSample {
    pub fn symbols(&self) -> impl Iterator<Item = u32> + '_ {
        self.frames.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub scene_id: u64,
    /// Starts with `[CLS]`; unpadded.
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub scene_id: u64,
    pub token_ids: Vec<u32>,
    /// Sorted, never 0 (the `[CLS]` slot).
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub scene: Scene,
    pub video: VideoSample,
    pub text: TextSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which actions/attributes each object admits, keyed by pool index.
#[derive(Debug, Clone)]
struct Compatibility {
    actions: HashMap<usize, Vec<usize>>,
    attributes: HashMap<usize, Vec<usize>>,
}

impl Compatibility {
    fn draw(pool: &ConceptPool, cfg: &DataConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "compat", 0);
        let (objects, actions, attributes) = (
            pool.of(Category::Object),
            pool.of(Category::Action),
            pool.of(Category::Attribute),
        );
        let mut acts = HashMap::new();
        let mut attrs = HashMap::new();
        for &o in &objects {
            let a: Vec<usize> = actions.choose_multiple(&mut rng, cfg.actions_per_object).copied().collect();
            let t: Vec<usize> = attributes.choose_multiple(&mut rng, cfg.attributes_per_object).copied().collect();
            acts.insert(o, a);
            attrs.insert(o, t);
        }
        Self { actions: acts, attributes: attrs }
    }
}

struct Phrase {
    object: usize,
    attributes: Vec<usize>,
    action: Option<usize>,
}

fn sample_phrases(pool: &ConceptPool, compat: &Compatibility, cfg: &DataConfig, rng: &mut impl Rng) -> Vec<Phrase> {
    let objects = pool.of(Category::Object);
    loop {
        let n_obj = if objects.len() > 1 && rng.random_bool(0.5) { 2 } else { 1 };
        let picked: Vec<usize> = objects.choose_multiple(rng, n_obj).copied().collect();
        let lo = cfg.min_concepts.max(n_obj);
        let hi = cfg.max_concepts;
        if lo > hi {
            continue;
        }
        let target = rng.random_range(lo..=hi);
        let mut phrases: Vec<Phrase> = picked
            .iter()
            .map(|&o| Phrase { object: o, attributes: vec![], action: None })
            .collect();
        let mut used: BTreeSet<usize> = picked.iter().copied().collect();
        let mut count = n_obj;
        let mut attempts = 0;
        while count < target && attempts < 64 {
            attempts += 1;
            let p = &mut phrases[rng.random_range(0..n_obj)];
            let want_action = p.action.is_none() && rng.random_bool(0.5);
            let cand = if want_action {
                compat.actions[&p.object].choose(rng).copied()
            } else if p.attributes.len() < 2 {
                compat.attributes[&p.object].choose(rng).copied()
            } else {
                None
            };
            if let Some(c) = cand {
                if used.insert(c) {
                    if want_action {
                        p.action = Some(c);
                    } else {
                        p.attributes.push(c);
                    }
                    count += 1;
                }
            }
        }
        if count == target {
            return phrases;
        }
    }
}

fn caption_tokens(phrases: &[Phrase], pool: &ConceptPool, lexicon: &Lexicon, rng: &mut impl Rng) -> (Vec<u32>, Vec<String>) {
    let id = |w: &str| lexicon.index_of(w).expect("template word in lexicon") as u32;
    let mut tokens = vec![CLS as u32];
    let mut words = Vec::new();
    match rng.random_range(0..4) {
        0 => {}
        1 => tokens.extend([id("a"), id("video"), id("of")]),
        2 => tokens.extend([id("a"), id("clip"), id("of")]),
        _ => tokens.extend([id("there"), id("is")]),
    }
    // Function words follow from the phrase structure, so they are
    // predictable from context: the first phrase takes "a", later ones
    // "the"; the joiner announces the shape of the phrase it introduces.
    for (i, p) in phrases.iter().enumerate() {
        if i > 0 {
            let joiner = match (p.action.is_some(), p.attributes.is_empty()) {
                (true, _) => "near",
                (false, false) => "with",
                (false, true) => "and",
            };
            tokens.push(id(joiner));
        }
        tokens.push(id(if i == 0 { "a" } else { "the" }));
        let mut concept_order: Vec<usize> = p.attributes.clone();
        concept_order.push(p.object);
        concept_order.extend(p.action);
        for c in concept_order {
            let w = &pool.concepts[c].word;
            tokens.push(id(w));
            words.push(w.clone());
        }
    }
    (tokens, words)
}

fn render_video(glyphs: &[u32], pool: &ConceptPool, cfg: &DataConfig, rng: &mut impl Rng) -> Vec<Vec<u32>> {
    let p = cfg.patches_per_frame;
    let mut frames: Vec<Vec<Option<u32>>> = vec![vec![None; p]; cfg.frames];
    let mut shown = vec![false; glyphs.len()];
    for frame in frames.iter_mut() {
        let mut slots: Vec<usize> = (0..p).collect();
        slots.shuffle(rng);
        let mut slots = slots.into_iter();
        for (g, seen) in glyphs.iter().zip(shown.iter_mut()) {
            if rng.random_bool(cfg.glyph_presence) {
                frame[slots.next().expect("frame fits all glyphs")] = Some(*g);
                *seen = true;
            }
        }
    }
    for (g, seen) in glyphs.iter().zip(&shown) {
        if !seen {
            let f = rng.random_range(0..cfg.frames);
            let free: Vec<usize> = (0..p).filter(|&i| frames[f][i].is_none()).collect();
            let slot = *free.choose(rng).expect("frame fits all glyphs");
            frames[f][slot] = Some(*g);
        }
    }
    frames
        .into_iter()
        .map(|fr| {
            fr.into_iter()
                .map(|s| s.unwrap_or_else(|| rng.random_range(0..pool.num_background)))
                .collect()
        })
        .collect()
}

fn generate_pair(scene_id: u64, pool: &ConceptPool, compat: &Compatibility, lexicon: &Lexicon, cfg: &DataConfig, seed: u64) -> Pair {
    let mut rng = seed::rng(seed, "scene", scene_id);
    let phrases = sample_phrases(pool, compat, cfg, &mut rng);
    let (token_ids, words) = caption_tokens(&phrases, pool, lexicon, &mut rng);
    let glyphs: Vec<u32> = words
        .iter()
        .map(|w| pool.concepts.iter().find(|c| &c.word == w).expect("scene word from pool").glyph)
        .collect();
    let frames = render_video(&glyphs, pool, cfg, &mut rng);
    Pair {
        scene: Scene { scene_id, concepts: words },
        video: VideoSample { scene_id, frames },
        text: TextSample { scene_id, token_ids },
    }
}

/// Generate train/val/test splits. Pure function of `(pool, cfg, seed)`;
/// splits are contiguous scene-id ranges and therefore disjoint.
pub fn generate_corpus(pool: &ConceptPool, cfg: &DataConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    pool.validate(cfg.max_concepts)?;
    let lexicon = pool.lexicon()?;
    let compat = Compatibility::draw(pool, cfg, seed);
    let (n_train, n_val, _) = cfg.split_sizes();
    let mut pairs: Vec<Pair> = (0..cfg.num_scenes as u64)
        .map(|id| generate_pair(id, pool, &compat, &lexicon, cfg, seed))
        .collect();
    let test = pairs.split_off(n_train + n_val);
    let val = pairs.split_off(n_train);
    Ok(Corpus { train: pairs, val, test })
}

/// BERT-style corruption of a caption.
///
/// `round(ratio × maskable)` positions (at least one) are selected among the
/// non-`[CLS]` tokens; each becomes `[MASK]` with probability 0.8, a random
/// non-reserved word with probability 0.1, and stays unchanged otherwise.
pub fn apply_mlm_mask(text: &TextSample, lexicon: &Lexicon, mask_ratio: f64, seed: u64) -> Result<MaskedText> {
    let (mask_positions, mut rng) = select_mask_positions(text, mask_ratio, seed)?;
    let replaceable: Vec<u32> = (0..lexicon.len())
        .filter(|&i| lexicon.kind(i) != WordKind::Reserved)
        .map(|i| i as u32)
        .collect();
    let mut token_ids = text.token_ids.clone();
    let mut targets = Vec::with_capacity(mask_positions.len());
    for &p in &mask_positions {
        targets.push(token_ids[p]);
        let r: f64 = rng.random();
        if r < 0.8 {
            token_ids[p] = MASK as u32;
        } else if r < 0.9 {
            token_ids[p] = *replaceable.choose(&mut rng).expect("lexicon has words");
        }
    }
    Ok(MaskedText { scene_id: text.scene_id, token_ids, mask_positions, targets })
}

/// Same selection as [`apply_mlm_mask`], but every selected token becomes
/// `[MASK]`. Used to score held-out masked-token prediction.
pub fn mask_all_selected(text: &TextSample, mask_ratio: f64, seed: u64) -> Result<MaskedText> {
    let (mask_positions, _) = select_mask_positions(text, mask_ratio, seed)?;
    let mut token_ids = text.token_ids.clone();
    let targets = mask_positions.iter().map(|&p| token_ids[p]).collect();
    for &p in &mask_positions {
        token_ids[p] = MASK as u32;
    }
    Ok(MaskedText { scene_id: text.scene_id, token_ids, mask_positions, targets })
}

fn select_mask_positions(text: &TextSample, mask_ratio: f64, seed: u64) -> Result<(Vec<usize>, ChaCha8Rng)> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask_ratio must be in (0, 1), got {mask_ratio}")));
    }
    let mut positions: Vec<usize> = (1..text.token_ids.len()).collect();
    if positions.is_empty() {
        return Err(Error::Empty("caption has no maskable positions"));
    }
    let count = ((mask_ratio * positions.len() as f64).round() as usize).clamp(1, positions.len());
    let mut rng = seed::rng(seed, "mlm", text.scene_id);
    let (chosen, _) = positions.partial_shuffle(&mut rng, count);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok((chosen, rng))
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the split, in batch order.
    pub indices: Vec<usize>,
    pub videos: Vec<VideoSample>,
    pub texts: Vec<TextSample>,
    pub masked: Vec<MaskedText>,
}

/// One epoch of shuffled, drop-last batches over a split.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    split: &'a [Pair],
    lexicon: &'a Lexicon,
    order: Vec<usize>,
    batch_size: usize,
    mask_ratio: f64,
    seed: u64,
    next: usize,
}

impl<'a> Batches<'a> {
    pub fn len(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Random access, used when resuming mid-epoch.
    pub fn get(&self, b: usize) -> Result<Batch> {
        let indices = self.order[b * self.batch_size..(b + 1) * self.batch_size].to_vec();
        let mut videos = Vec::with_capacity(indices.len());
        let mut texts = Vec::with_capacity(indices.len());
        let mut masked = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let pair = &self.split[i];
            let mseed = seed::derive(self.seed, "batch-mask", (b * self.batch_size + slot) as u64);
            masked.push(apply_mlm_mask(&pair.text, self.lexicon, self.mask_ratio, mseed)?);
            videos.push(pair.video.clone());
            texts.push(pair.text.clone());
        }
        Ok(Batch { indices, videos, texts, masked })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.len() {
            return None;
        }
        self.next += 1;
        Some(self.get(self.next - 1))
    }
}

/// Shuffle `split` with `seed` and cut it into full batches of `batch_size`.
pub fn make_batches<'a>(split: &'a [Pair], lexicon: &'a Lexicon, batch_size: usize, mask_ratio: f64, seed: u64) -> Result<Batches<'a>> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be >= 2 for in-batch negatives".into()));
    }
    if split.len() < batch_size {
        return Err(Error::Config(format!("split of {} pairs is smaller than batch size {batch_size}", split.len())));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut seed::rng(seed, "shuffle", 0));
    Ok(Batches { split, lexicon, order, batch_size, mask_ratio, seed, next: 0 })
}

#[derive(Serialize, Deserialize)]
struct Record {
    scene_id: u64,
    concepts: Vec<String>,
    frames: Vec<Vec<u32>>,
    token_ids: Vec<u32>,
}

pub fn write_split<W: Write>(pairs: &[Pair], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for p in pairs {
        let rec = Record {
            scene_id: p.scene.scene_id,
            concepts: p.scene.concepts.clone(),
            frames: p.video.frames.clone(),
            token_ids: p.text.token_ids.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_split<R: BufRead>(input: R) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        pairs.push(Pair {
            scene: Scene { scene_id: r.scene_id, concepts: r.concepts },
            video: VideoSample { scene_id: r.scene_id, frames: r.frames },
            text: TextSample { scene_id: r.scene_id, token_ids: r.token_ids },
        });
    }
    Ok(pairs)
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let f = std::fs::File::create(dir.join(format!("{}.jsonl", split.name())))?;
        write_split(corpus.split(split), f)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let read = |s: Split| -> Result<Vec<Pair>> {
        let f = std::fs::File::open(dir.join(format!("{}.jsonl", s.name())))?;
        read_split(BufReader::new(f))
    };
    Ok(Corpus { train: read(Split::Train)?, val: read(Split::Val)?, test: read(Split::Test)? })
}

/// Check a pair against the pool: every patch is background or a scene
/// glyph, every scene glyph is drawn, every concept word appears once in the
/// caption.
pub fn check_pair(pair: &Pair, pool: &ConceptPool, lexicon: &Lexicon) -> Result<()> {
    let bad = |m: String| Err(Error::Config(format!("scene {}: {m}", pair.scene.scene_id)));
    let glyph_of: HashMap<&str, u32> = pool.concepts.iter().map(|c| (c.word.as_str(), c.glyph)).collect();
    let scene_glyphs: BTreeSet<u32> = pair.scene.concepts.iter().filter_map(|w| glyph_of.get(w.as_str()).copied()).collect();
    if scene_glyphs.len() != pair.scene.concepts.len() {
        return bad("unknown or repeated concept".into());
    }
    let drawn: BTreeSet<u32> = pair.video.symbols().filter(|&s| s >= pool.num_background).collect();
    if drawn != scene_glyphs {
        return bad(format!("video glyphs {drawn:?} != scene glyphs {scene_glyphs:?}"));
    }
    if pair.text.token_ids.first() != Some(&(CLS as u32)) {
        return bad("caption must start with [CLS]".into());
    }
    for w in &pair.scene.concepts {
        let id = lexicon.index_of(w).map(|i| i as u32);
        let n = pair.text.token_ids.iter().filter(|&&t| Some(t) == id).count();
        if n != 1 {
            return bad(format!("concept `{w}` appears {n} times in caption"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize) -> DataConfig {
        DataConfig { num_scenes: n, ..DataConfig::default() }
    }

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let pool = ConceptPool::desk_default();
        let lex = pool.lexicon().unwrap();
        let a = generate_corpus(&pool, &small_cfg(100), 7).unwrap();
        let b = generate_corpus(&pool, &small_cfg(100), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&pool, &small_cfg(100), 8).unwrap();
        assert_ne!(a, c);
        for split in Split::ALL {
            for p in a.split(split) {
                check_pair(p, &pool, &lex).unwrap();
                assert!((2..=5).contains(&p.scene.concepts.len()));
                assert!(p.text.token_ids.len() <= 16);
                assert_eq!(p.video.frames.len(), 2);
                assert!(p.video.frames.iter().all(|f| f.len() == 8));
            }
        }
    }

    #[test]
    fn split_arithmetic() {
        let pool = ConceptPool::desk_default();
        let c = generate_corpus(&pool, &small_cfg(10), 1).unwrap();
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (8, 1, 1));
        let ids: BTreeSet<u64> = Split::ALL.iter().flat_map(|&s| c.split(s).iter().map(|p| p.scene.scene_id)).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn small_pool_is_rejected() {
        let pool = ConceptPool::from_words(&["dog", "cat"], &["running"], &["red"], 2);
        assert!(matches!(generate_corpus(&pool, &small_cfg(20), 1), Err(Error::Config(_))));
    }

    fn caption(n: usize) -> TextSample {
        let mut token_ids = vec![CLS as u32];
        token_ids.extend((0..n as u32).map(|i| 13 + i % 20));
        TextSample { scene_id: 3, token_ids }
    }

    #[test]
    fn mask_count_rounding() {
        let lex = ConceptPool::desk_default().lexicon().unwrap();
        let m = apply_mlm_mask(&caption(20), &lex, 0.15, 1).unwrap();
        assert_eq!(m.mask_positions.len(), 3);
        assert_eq!(m.targets.len(), 3);
        assert!(!m.mask_positions.contains(&0));
        // round(0.15 * 3) = 0 -> forced to 1
        let m = apply_mlm_mask(&caption(3), &lex, 0.15, 1).unwrap();
        assert_eq!(m.mask_positions.len(), 1);
        assert_eq!(apply_mlm_mask(&caption(20), &lex, 0.15, 9).unwrap(), apply_mlm_mask(&caption(20), &lex, 0.15, 9).unwrap());
        assert!(apply_mlm_mask(&caption(0), &lex, 0.15, 1).is_err());
        assert!(apply_mlm_mask(&caption(5), &lex, 1.0, 1).is_err());
    }

    #[test]
    fn corruption_split_is_roughly_80_10_10() {
        let lex = ConceptPool::desk_default().lexicon().unwrap();
        let text = caption(40);
        let (mut masked, mut kept, mut total) = (0, 0, 0);
        for s in 0..2000 {
            let m = apply_mlm_mask(&text, &lex, 0.15, s).unwrap();
            for (&p, &t) in m.mask_positions.iter().zip(&m.targets) {
                assert_eq!(text.token_ids[p], t);
                total += 1;
                if m.token_ids[p] == MASK as u32 {
                    masked += 1;
                } else if m.token_ids[p] == t {
                    kept += 1;
                }
            }
        }
        let frac = |n: usize| n as f64 / total as f64;
        assert!((frac(masked) - 0.8).abs() < 0.02);
        // random replacement can coincide with the original word
        assert!((frac(kept) - 0.1).abs() < 0.02);
    }

    #[test]
    fn batching_contract() {
        let pool = ConceptPool::desk_default();
        let lex = pool.lexicon().unwrap();
        let c = generate_corpus(&pool, &small_cfg(13), 1).unwrap();
        let split = &c.train[..10];
        let b: Vec<Batch> = make_batches(split, &lex, 4, 0.15, 0).unwrap().map(Result::unwrap).collect();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.videos.len() == 4 && x.masked.len() == 4));
        assert!(make_batches(split, &lex, 1, 0.15, 0).is_err());
        assert!(make_batches(&split[..3], &lex, 4, 0.15, 0).is_err());

        let o1 = make_batches(split, &lex, 2, 0.15, 1).unwrap().order().to_vec();
        let o2 = make_batches(split, &lex, 2, 0.15, 2).unwrap().order().to_vec();
        assert_ne!(o1, o2);
        let (mut s1, mut s2) = (o1.clone(), o2.clone());
        s1.sort();
        s2.sort();
        assert_eq!(s1, s2);
        for x in &b {
            for (k, &i) in x.indices.iter().enumerate() {
                assert_eq!(x.videos[k].scene_id, split[i].scene.scene_id);
                assert_eq!(x.texts[k].scene_id, x.masked[k].scene_id);
            }
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let pool = ConceptPool::desk_default();
        let c = generate_corpus(&pool, &small_cfg(20), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
    }
}
