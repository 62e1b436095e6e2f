#![allow(dead_code)]

use lexlat_core::config::ExperimentConfig;
use lexlat_core::experiment::Workspace;
use lexlat_core::model::DualStreamModel;

/// A configuration small enough for debug-build tests.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.num_scenes = 60;
    cfg.encoder.stem_blocks = 1;
    cfg.encoder.specific_blocks = 1;
    cfg.encoder.hidden = 16;
    cfg.encoder.latent_dim = 8;
    cfg.encoder.heads = 2;
    cfg.train.batch_size = 8;
    cfg.train.epochs_total = 2;
    cfg.train.epochs_stage1 = 1;
    cfg.train.warmup_epochs = 1;
    cfg.train.stage0_epochs = 0;
    cfg.eval.chance_seeds = 3;
    cfg.validate().unwrap();
    cfg
}

pub fn tiny() -> (ExperimentConfig, Workspace, DualStreamModel) {
    let cfg = tiny_config();
    let ws = Workspace::generate(&cfg).unwrap();
    let model = DualStreamModel::new(cfg.encoder_config().unwrap(), cfg.init_seed()).unwrap();
    (cfg, ws, model)
}
