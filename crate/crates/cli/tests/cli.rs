use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfu_core::checkpoint::{config_hash, load_checkpoint};
use dfu_core::model::{build, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
seed = 3

[model]
arch = "dfu"
levels = 2
blocks_per_level = 1
base_channels = 4
channel_mult = [1, 2]
spatial_k = 3
modes = 4
emb_dim = 8

[data]
kind = "gaussian-process"
alpha = 2.0
cutoff = 3
resolutions = [8, 16]
count = 4

[train]
steps = 3
batch_size = 2

[finetune]
target_resolution = 24
steps = 4

[sample]
steps = 4
resolutions = [8, 16]
count = 2
cols = 2

[eval]
resolutions = [8]
count = 4
probes = 2
"#;

fn dfu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfu")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_keys_report_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nsteps = 3\nlearning_rate = 0.1\n");
    let out = dfu(&["--config", s(&cfg), "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.learning_rate"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "[model]\nlevels = \"three\"\n");
    let out = dfu(&["--config", s(&cfg), "gradcheck"]);
    assert!(stderr(&out).contains("model.levels"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "[data]\nkind = \"band-limited-fourier\"\nalpha = 2.0\n");
    let out = dfu(&["--config", s(&cfg), "gradcheck"]);
    assert!(stderr(&out).contains("data.alpha"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "[mixture]\nkind = \"weighted\"\ntop = 0.4\n");
    let out = dfu(&["--config", s(&cfg), "gradcheck"]);
    assert!(stderr(&out).contains("mixture"), "{}", stderr(&out));
}

#[test]
fn zero_step_training_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "0"]));
    let (state, info) = load_checkpoint(&run.join("checkpoint.dfu")).unwrap();
    let spec: ModelSpec = ModelSpec {
        levels: 2,
        base_channels: 4,
        channel_mult: vec![1, 2],
        modes: 4,
        emb_dim: 8,
        ..ModelSpec::desk()
    };
    let init = build(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(state.model, init);
    assert_eq!(state.ema, init.params);
    assert_eq!(state.step, 0);
    // The checkpoint embeds the resolved config and its hash.
    let resolved = std::fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert_eq!(info.config, resolved);
    assert_eq!(info.config_hash, config_hash(&resolved));
    assert!(!run.join(".lock").exists());
}

#[test]
fn resolved_config_expands_defaults_and_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nkind = \"edge-plus-smooth\"\n");
    let run = dir.path().join("run");
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "0"]));
    let text = std::fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    for key in ["sharpness", "smooth_cutoff", "batch_size", "ema_decay", "sigma_max", "extractor"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    // Feeding the resolved file back resolves to the same text.
    let again = dir.path().join("again");
    ok(&dfu(&["--config", s(&run.join("resolved_config.toml")), "train", "--out", s(&again), "--steps", "0"]));
    assert_eq!(std::fs::read_to_string(again.join("resolved_config.toml")).unwrap(), text);
}

#[test]
fn train_and_sample_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run)]));
        let smp = dir.path().join(format!("{name}-samples"));
        ok(&dfu(&["--config", s(&cfg), "sample", "--out", s(&smp), "--checkpoint", s(&run.join("checkpoint.dfu"))]));
        let read = |p: PathBuf| std::fs::read(p).unwrap();
        files.push([
            read(run.join("metrics.jsonl")),
            read(run.join("checkpoint.dfu")),
            read(smp.join("samples_r8.png")),
            read(smp.join("samples_r16.png")),
        ]);
    }
    assert_eq!(files[0], files[1]);
    let log = String::from_utf8(files[0][0].clone()).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.contains("config_hash") && !l.contains("wall_time")));
}

#[test]
fn resumed_training_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (whole, first, second) = (dir.path().join("w"), dir.path().join("f"), dir.path().join("s"));
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&whole), "--steps", "4", "--save-every", "2"]));
    assert!(whole.join("checkpoint-2.dfu").exists());
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&first), "--steps", "2"]));
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&second), "--steps", "2", "--resume", s(&first.join("checkpoint.dfu"))]));
    let (a, _) = load_checkpoint(&whole.join("checkpoint.dfu")).unwrap();
    let (b, _) = load_checkpoint(&second.join("checkpoint.dfu")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inadmissible_sample_resolution_is_reported_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "0"]));
    let ckpt = run.join("checkpoint.dfu");
    let out = dfu(&["--config", s(&cfg), "sample", "--out", s(&dir.path().join("x")), "--checkpoint", s(&ckpt), "--resolutions", "8,13"]);
    assert_eq!(out.status.code(), Some(2));
    let (state, _) = load_checkpoint(&ckpt).unwrap();
    let want = state.model.check_resolution(13).unwrap_err().to_string();
    assert!(stderr(&out).contains(&want), "{}", stderr(&out));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn sampling_beyond_training_resolutions_writes_one_grid_each() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "1"]));
    let smp = dir.path().join("smp");
    ok(&dfu(&["--config", s(&cfg), "sample", "--out", s(&smp), "--checkpoint", s(&run.join("checkpoint.dfu")), "--resolutions", "8,16,24,32", "--count", "3"]));
    for r in [8, 16, 24, 32] {
        let img = image::open(smp.join(format!("samples_r{r}.png"))).unwrap();
        // Two columns with a 2-pixel gutter.
        assert_eq!(img.width() as usize, 2 * r + 2);
    }
    let report = std::fs::read_to_string(smp.join("samples.json")).unwrap();
    assert!(report.contains("config_hash"));
}

#[test]
fn oracle_score_error_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("ev");
    let out = dfu(&["--config", s(&cfg), "eval", "--out", s(&out_dir), "--oracle", "--metric", "score-error"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval.json")).unwrap()).unwrap();
    let e = v["report"][0]["score_error"].as_f64().unwrap();
    assert!(e < 1e-10, "{e}");
}

#[test]
fn eval_of_a_checkpoint_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "1"]));
    let ev = dir.path().join("ev");
    ok(&dfu(&["--config", s(&cfg), "eval", "--out", s(&ev), "--checkpoint", s(&run.join("checkpoint.dfu"))]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let row = &v["report"][0];
    for k in ["score_error", "coherence_error", "fidelity_error", "proxy_fid"] {
        assert!(row[k].as_f64().is_some_and(f64::is_finite), "{k}: {row}");
    }
}

#[test]
fn dataset_cache_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    ok(&dfu(&["--config", s(&cfg), "prepare-data", "--out", s(&data)]));
    let cached = TINY.replacen("count = 4\n", &format!("count = 4\ncache = {:?}\n", s(&data.join("dataset.dfu"))), 1);
    let cfg2 = dir.path().join("cached.toml");
    std::fs::write(&cfg2, cached).unwrap();
    ok(&dfu(&["--config", s(&cfg2), "train", "--out", s(&dir.path().join("run")), "--steps", "2"]));
}

#[test]
fn finetune_audits_frozen_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    ok(&dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "2"]));
    let ft = dir.path().join("ft");
    ok(&dfu(&["--config", s(&cfg), "finetune", "--out", s(&ft), "--checkpoint", s(&run.join("checkpoint.dfu"))]));
    let log = std::fs::read_to_string(ft.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.contains("\"freeze\""));
}

#[test]
fn a_locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "1\n").unwrap();
    let out = dfu(&["--config", s(&cfg), "train", "--out", s(&run), "--steps", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("in use"));
    assert!(!run.join("checkpoint.dfu").exists());
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let small = TINY.replace("base_channels = 4", "base_channels = 16");
    let cfg = write_config(dir.path(), &small);
    let out_dir = dir.path().join("gc");
    let out = dfu(&["--config", s(&cfg), "gradcheck", "--out", s(&out_dir)]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS conv2d-circular") && text.contains("dfu block") && !text.contains("FAIL"));
    assert!(out_dir.join("gradcheck.json").exists());
}
