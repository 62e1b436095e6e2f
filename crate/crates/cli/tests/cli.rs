use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
num_scenes = 60

[encoder]
stem_blocks = 1
specific_blocks = 1
hidden = 16
latent_dim = 8
heads = 2

[train]
batch_size = 8
epochs_total = 2
epochs_stage1 = 1
warmup_epochs = 1
stage0_epochs = 1

[eval]
chance_seeds = 2
"#;

fn lexlat(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_lexlat"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("LEXLAT_OUTPUT_DIR", dir.join("out"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lexlat(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = lexlat(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn full_pipeline_with_staged_training() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.join("out");

    assert!(err(d, &["train"]).contains("lexlat generate"));
    ok(d, &["generate"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("corpus/manifest.json")).unwrap()).unwrap();
    for split in ["train", "val", "test"] {
        let lines = fs::read_to_string(out.join(format!("corpus/{split}.jsonl"))).unwrap().lines().count();
        assert_eq!(manifest[split].as_u64().unwrap() as usize, lines, "{split} count");
    }
    let first = fs::read(out.join("corpus/train.jsonl")).unwrap();
    assert!(err(d, &["generate"]).contains("--force"));
    ok(d, &["generate", "--force"]);
    assert_eq!(fs::read(out.join("corpus/train.jsonl")).unwrap(), first, "regeneration is deterministic");

    assert!(err(d, &["train"]).contains("pretrain-text"));
    assert!(err(d, &["train", "--stage", "2"]).contains("--stage 1"));
    ok(d, &["pretrain-text"]);
    assert!(out.join("stage0/model.safetensors").exists() && out.join("stage0/config.toml").exists());

    // stage 1 stops at the boundary; stage 2 continues from it
    ok(d, &["train", "--stage", "1"]);
    let staged_1 = fs::read_to_string(out.join("train/loss_log.jsonl")).unwrap();
    assert!(out.join("train/stage1.safetensors").exists() && !out.join("train/final.safetensors").exists());
    assert!(staged_1.lines().all(|l| l.contains("\"stage\":1")));
    ok(d, &["train", "--stage", "2"]);
    let staged = fs::read_to_string(out.join("train/loss_log.jsonl")).unwrap();
    assert!(staged.starts_with(&staged_1) && staged.contains("\"stage\":2"));

    // one uninterrupted run writes the same log
    ok(d, &["train"]);
    assert_eq!(fs::read_to_string(out.join("train/loss_log.jsonl")).unwrap(), staged);

    for branch in ["latent", "lexicon", "fused"] {
        let text = ok(d, &["eval", "--branch", branch]);
        assert!(text.starts_with(branch), "{text}");
    }
    let metrics = fs::read(out.join("eval/metrics-fused.jsonl")).unwrap();
    ok(d, &["eval", "--branch", "fused"]);
    assert_eq!(fs::read(out.join("eval/metrics-fused.jsonl")).unwrap(), metrics, "metric records are reproducible");
    let record: serde_json::Value = serde_json::from_slice(&metrics).unwrap();
    assert_eq!(record["branch"], "fused");
    assert!(record["selected"]["r_at_1"].as_f64().unwrap() >= 0.0);

    let listing = ok(d, &["inspect-lexicon", "--top-k", "3", "--count", "2"]);
    assert_eq!(listing, fs::read_to_string(out.join("inspect/lexicon.txt")).unwrap());
    assert!(!listing.is_empty());

    for sub in ["corpus", "stage0", "train", "eval", "inspect"] {
        assert!(out.join(sub).join("config.toml").exists(), "{sub} has no resolved config");
    }
    let resolved = fs::read_to_string(out.join("train/config.toml")).unwrap();
    assert!(resolved.contains("epochs_total = 2") && resolved.contains(&out.display().to_string()));
}

#[test]
fn skip_stage0_flags_and_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.join("out");
    ok(d, &["generate"]);
    ok(d, &["train", "--skip-stage0", "--set", "train.stage0_epochs=0"]);
    assert!(out.join("train/final.safetensors").exists());

    // flags override the config file
    let resolved = fs::read_to_string(out.join("train/config.toml")).unwrap();
    assert!(resolved.contains("stage0_epochs = 0"));
    // a different master seed no longer matches the generated corpus
    assert!(err(d, &["eval", "--seed", "6"]).contains("generate --force"));

    let table = ok(d, &["ablate", "--grid", "custom", "--variant", "full", "--variant", "beta=0.01"]);
    assert!(table.contains("beta=0.01"));
    assert!(out.join("ablate/custom/table.json").exists());
    assert!(err(d, &["ablate", "--grid", "custom", "--variant", "no_wings"]).contains("no_wings"));
}

#[test]
fn invalid_configuration_is_rejected_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let msg = err(d, &["generate", "--set", "lexicon.objects=[\"cup\"]", "--set", "lexicon.actions=[]", "--set", "lexicon.attributes=[]"]);
    assert!(msg.starts_with("error:"), "{msg}");
    assert!(!d.join("out/corpus").exists());
    assert!(err(d, &["generate", "--set", "train.batch_size=1"]).contains("batch"));
    assert!(err(d, &["generate", "--set", "bogus_key=1"]).contains("bogus_key"));
}
