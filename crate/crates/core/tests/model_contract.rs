mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use lexlat_core::lexicon::DenseVector;
use lexlat_core::model::{DualStreamModel, Modality, ParamGroup, Stage};
use lexlat_core::trainer::Trainer;

fn snapshot(model: &DualStreamModel) -> BTreeMap<String, Vec<f32>> {
    model.params().snapshot().unwrap()
}

fn group_of(model: &DualStreamModel) -> BTreeMap<String, ParamGroup> {
    model.params().params().iter().map(|p| (p.name.clone(), p.group)).collect()
}

#[test]
fn output_shapes_and_nonnegativity() {
    let (cfg, ws, model) = common::tiny();
    let pair = &ws.corpus.test[0];
    let v = model.encode_video(&pair.video).unwrap();
    let t = model.encode_text(&pair.text.token_ids).unwrap();
    let w = ws.lexicon.len();
    assert_eq!(v.f_lat.values().len(), cfg.encoder.latent_dim);
    assert_eq!(t.f_lat.values().len(), cfg.encoder.latent_dim);
    assert_eq!(v.f_lex.values().len(), w);
    assert_eq!(t.f_lex.values().len(), w);
    assert_eq!(v.p_lex.positions(), cfg.data.frames * cfg.data.patches_per_frame);
    assert_eq!(t.p_lex.positions(), pair.text.token_ids.len());
    assert_eq!(v.p_lex.width(), w);
    assert!(v.f_lex.values().iter().chain(t.f_lex.values()).all(|x| *x >= 0.0));
}

#[test]
fn construction_is_deterministic_in_the_seed() {
    let (cfg, _, a) = common::tiny();
    let b = DualStreamModel::new(cfg.encoder_config().unwrap(), cfg.init_seed()).unwrap();
    let c = DualStreamModel::new(cfg.encoder_config().unwrap(), cfg.init_seed() + 1).unwrap();
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn batched_and_single_encodings_agree() {
    let (_, ws, model) = common::tiny();
    let texts: Vec<&[u32]> = ws.corpus.test.iter().take(5).map(|p| p.text.token_ids.as_slice()).collect();
    let batched = model.encode_texts(&texts).unwrap();
    for (t, b) in texts.iter().zip(&batched) {
        let single = model.encode_text(t).unwrap();
        for (x, y) in single.f_lex.values().iter().zip(b.f_lex.values()) {
            assert!((x - y).abs() < 1e-5, "padding leaked into the encoding");
        }
    }
}

#[test]
fn groups_partition_the_parameters_and_the_head_is_counted_once() {
    let (_, _, model) = common::tiny();
    let counts = model.parameter_groups();
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    assert_eq!(total, model.params().total_count());
    let names: BTreeSet<&str> = model.params().params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.len(), model.params().params().len(), "a parameter is registered twice");
    let head: Vec<&str> = model
        .params()
        .params()
        .iter()
        .filter(|p| p.group == ParamGroup::LexiconHead)
        .map(|p| p.name.as_str())
        .collect();
    assert!(!head.is_empty());
    assert!(head.iter().all(|n| n.starts_with("lexicon_head.")));
    assert!(names.iter().all(|n| !n.contains("lexicon_head") || n.starts_with("lexicon_head.")));
}

#[test]
fn the_lexicon_head_is_one_shared_instance() {
    let (_, _, model) = common::tiny();
    assert!(Arc::ptr_eq(model.lexicon_head(Modality::Video), model.lexicon_head(Modality::Text)));
    assert_eq!(model.lexicon_decoder_weight().dims(), model.word_embeddings().dims());
}

#[test]
fn stage_one_freezes_the_text_stream_and_stage_two_trains_everything() {
    let (cfg, ws, model) = common::tiny();
    let before = snapshot(&model);
    let groups = group_of(&model);
    let mut trainer = Trainer::new(model, &ws.corpus, &ws.lexicon, cfg.train.clone(), cfg.loss.clone()).unwrap();
    let rec = trainer.step().unwrap();
    assert_eq!(rec.loss.stage, 1);
    let after = snapshot(trainer.model());
    for (name, value) in &after {
        let g = groups[name];
        let changed = before[name] != *value;
        if g.is_text() || matches!(g, ParamGroup::LexiconHead | ParamGroup::WordEmbeddings) {
            assert!(!changed, "{name} changed in stage 1");
        }
    }
    assert!(after.iter().any(|(n, v)| groups[n].is_video() && before[n] != *v));

    // run to the first stage-2 step: the shared head now moves, and with it
    // the video stream's lexicon output
    while trainer.state().step < trainer.stage1_steps() {
        trainer.step().unwrap();
    }
    let pre = snapshot(trainer.model());
    let video = &ws.corpus.test[0].video;
    let pre_out = trainer.model().encode_video(video).unwrap();
    let rec = trainer.step().unwrap();
    assert_eq!(rec.loss.stage, 2);
    assert!(trainer.model().frozen().is_empty());
    let post = snapshot(trainer.model());
    for g in [ParamGroup::LexiconHead, ParamGroup::TextStem, ParamGroup::WordEmbeddings] {
        assert!(post.iter().any(|(n, v)| groups[n] == g && pre[n] != *v), "{g} did not update in stage 2");
    }
    assert_ne!(trainer.model().encode_video(video).unwrap().f_lex, pre_out.f_lex);
}

#[test]
fn explicit_stage_masks() {
    let (_, _, mut model) = common::tiny();
    let frozen = model.set_stage(Stage::One).clone();
    assert!(frozen.contains(&ParamGroup::LexiconHead) && frozen.contains(&ParamGroup::TextStem));
    assert!(!frozen.iter().any(|g| g.is_video()));
    assert!(!model.text_trainable());
    assert!(model.set_stage(Stage::Two).is_empty());
    assert!(model.text_trainable());
}
