mod common;

use lexlat_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointMeta};
use lexlat_core::model::DualStreamModel;
use lexlat_core::trainer::Trainer;

#[test]
fn round_trip_is_bit_exact() {
    let (cfg, _, model) = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&model, &CheckpointMeta::default(), None, &path).unwrap();
    let back = load_checkpoint_for(&path, &cfg.encoder_config().unwrap()).unwrap();
    assert_eq!(back.model.params().snapshot().unwrap(), model.params().snapshot().unwrap());
    assert_eq!(back.model.config(), model.config());
    assert!(back.optimizer.is_none());
}

#[test]
fn config_mismatch_is_an_error() {
    let (cfg, _, model) = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&model, &CheckpointMeta::default(), None, &path).unwrap();
    let mut other = cfg.encoder_config().unwrap();
    other.hidden = 32;
    let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
    assert!(err.contains("hidden"), "{err}");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn resume_reproduces_the_next_losses() {
    let (cfg, ws, model) = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.safetensors");
    let mut a = Trainer::new(model, &ws.corpus, &ws.lexicon, cfg.train.clone(), cfg.loss.clone()).unwrap();
    // stop mid-epoch so the batch order, stage and λ all come from the state
    for _ in 0..3 {
        a.step().unwrap();
    }
    a.save(&path).unwrap();
    let mut b = Trainer::resume(&path, &ws.corpus, &ws.lexicon, cfg.train.clone(), cfg.loss.clone()).unwrap();
    assert_eq!(b.state(), a.state());
    for _ in 0..5 {
        assert_eq!(a.step().unwrap(), b.step().unwrap());
    }
    assert_eq!(a.model().params().snapshot().unwrap(), b.model().params().snapshot().unwrap());

    let mut changed = cfg.train.clone();
    changed.lr_peak *= 2.0;
    assert!(Trainer::resume(&path, &ws.corpus, &ws.lexicon, changed, cfg.loss.clone()).is_err());
}

#[test]
fn fresh_model_loads_into_the_same_outputs() {
    let (cfg, ws, model) = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&model, &CheckpointMeta::default(), None, &path).unwrap();
    let back: DualStreamModel = load_checkpoint(&path).unwrap().model;
    let t = &ws.corpus.test[0].text.token_ids;
    assert_eq!(back.encode_text(t).unwrap(), model.encode_text(t).unwrap());
    let _ = cfg;
}
