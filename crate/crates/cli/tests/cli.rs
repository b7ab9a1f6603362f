use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn matforge(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matforge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MATFORGE_WORKERS")
        .output()
        .expect("binary runs")
}

fn tiny(out: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(["--config", TINY]);
    matforge(out, &all)
}

/// Runs a command that must succeed and returns its run directory.
fn ok(out: &Path, args: &[&str], with_config: bool) -> PathBuf {
    let o = if with_config { tiny(out, args) } else { matforge(out, args) };
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(o.status.success(), "{args:?} failed: {stderr}");
    let line = stderr.lines().find_map(|l| l.strip_prefix("run directory ")).expect("run directory reported");
    PathBuf::from(line)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn stage1(out: &Path) -> PathBuf {
    ok(out, &["train-diffusion"], true).join("stage1.ckpt")
}

#[test]
fn missing_keys_are_all_reported_with_exit_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(TINY).unwrap().replace("clip = 0.1\n", "").replace("lambda_tv = 100.0\n", "");
    let cfg = tmp.path().join("broken.toml");
    fs::write(&cfg, text).unwrap();
    let o = matforge(tmp.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("rl.clip") && stderr.contains("reward.lambda_tv"), "{stderr}");
}

#[test]
fn io_and_numeric_failures_have_their_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tiny(tmp.path(), &["sample", "--checkpoint", "/nonexistent/stage1.ckpt"]);
    assert_eq!(o.status.code(), Some(4));
    let cfg = tmp.path().join("hot.toml");
    fs::write(&cfg, fs::read_to_string(TINY).unwrap().replace("lr = 1e-3\nwarmup", "lr = 1e200\nwarmup")).unwrap();
    let o = matforge(tmp.path(), &["train-diffusion", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_directory_is_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = ok(tmp.path(), &["train-diffusion", "--seed", "9"], true);
    let cfg = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 9"));
    // the stored config reruns to the same artifacts
    let again = ok(tmp.path(), &["train-diffusion", "--config", dir.join("config.toml").to_str().unwrap()], false);
    assert_eq!(read(dir.join("stage1.ckpt")), read(again.join("stage1.ckpt")));
    assert_eq!(read(dir.join("diffusion_loss.csv")), read(again.join("diffusion_loss.csv")));
    let manifest = fs::read_to_string(dir.join("manifest.csv")).unwrap();
    for f in [
        "stage1.ckpt",
        "diffusion_loss.csv",
        "checkpoints/stage1_000002.ckpt",
        "strips/stage1_samples.png",
    ] {
        assert!(manifest.lines().any(|l| l.starts_with(&format!("{f},"))), "{f} not in manifest");
    }
    let rows = fs::read_to_string(dir.join("diffusion_loss.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = ok(tmp.path(), &["train-diffusion"], true);
    let partial = ok(tmp.path(), &["train-diffusion", "--steps", "2"], true);
    let resumed = ok(tmp.path(), &["train-diffusion", "--resume", partial.to_str().unwrap(), "--steps", "4"], false);
    assert_eq!(resumed, partial);
    assert_eq!(read(straight.join("stage1.ckpt")), read(resumed.join("stage1.ckpt")));
    assert_eq!(read(straight.join("diffusion_loss.csv")), read(resumed.join("diffusion_loss.csv")));
}

#[test]
fn sampling_twice_with_one_seed_gives_identical_pngs() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = stage1(tmp.path());
    let args = ["sample", "--checkpoint", ckpt.to_str().unwrap(), "--seed", "5"];
    let (a, b) = (ok(tmp.path(), &args, true), ok(tmp.path(), &args, true));
    let (fa, fb) = (files_under(&a.join("samples")), files_under(&b.join("samples")));
    assert_eq!(fa.len(), 2 * 8 + 8);
    assert!(fa.iter().any(|p| p.ends_with("grids/0000_metal-0_5.png")));
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(read(x), read(y));
    }
    assert_eq!(read(a.join("samples.csv")), read(b.join("samples.csv")));
}

#[test]
fn zero_epoch_finetuning_returns_the_input_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = stage1(tmp.path());
    let cfg = tmp.path().join("lum.toml");
    fs::write(
        &cfg,
        fs::read_to_string(TINY).unwrap().replace("reward = \"realism\"", "reward = \"luminance\""),
    )
    .unwrap();
    let dir = ok(
        tmp.path(),
        &[
            "rl-finetune",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--epochs",
            "0",
        ],
        false,
    );
    assert_eq!(read(&ckpt), read(dir.join("policy.ckpt")));
    let rows = fs::read_to_string(dir.join("rl_metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
}

#[test]
fn resumed_finetuning_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = stage1(tmp.path());
    let cfg = tmp.path().join("lum.toml");
    fs::write(
        &cfg,
        fs::read_to_string(TINY).unwrap().replace("reward = \"realism\"", "reward = \"luminance\""),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let k = ckpt.to_str().unwrap();
    let straight = ok(tmp.path(), &["rl-finetune", "--config", c, "--checkpoint", k, "--epochs", "2"], false);
    let partial = ok(tmp.path(), &["rl-finetune", "--config", c, "--checkpoint", k, "--epochs", "1"], false);
    ok(tmp.path(), &["rl-finetune", "--resume", partial.to_str().unwrap(), "--epochs", "2"], false);
    for f in ["policy.ckpt", "rl_metrics.csv", "strips/epochs.png", "images/renders/0002_brick-0_0.png"] {
        assert_eq!(read(straight.join(f)), read(partial.join(f)), "{f}");
    }
    assert_ne!(read(&ckpt), read(straight.join("policy.ckpt")));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let data = ok(out, &["gen-data"], true);
    assert!(data.join("dataset/000003_metal.png").exists());
    assert!(data.join("dataset/000003_metal.meta.txt").exists());
    let corpus = fs::read_to_string(data.join("corpus.csv")).unwrap();
    assert_eq!(corpus.lines().count(), 1 + 2 * (16 + 8) * 2);

    let ckpt = stage1(out);
    let reward = ok(out, &["train-reward"], true);
    let head = reward.join("reward_head.ckpt");
    let prompts = ok(
        out,
        &[
            "select-prompts",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--reward-head",
            head.to_str().unwrap(),
        ],
        true,
    );
    let selected = fs::read_to_string(prompts.join("prompts.toml")).unwrap();
    assert_eq!(selected.matches("[[prompts]]").count(), 8);

    let rl = ok(
        out,
        &[
            "rl-finetune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--reward-head",
            head.to_str().unwrap(),
            "--prompts",
            prompts.join("prompts.toml").to_str().unwrap(),
        ],
        true,
    );
    let metrics = rl.join("rl_metrics.csv");
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 1 + 2);

    let grid = data.join("dataset/000000_brick.png");
    let rendered = ok(out, &["render", "--grid", grid.to_str().unwrap()], true);
    assert!(rendered.join("renders/000000_brick.png").exists());

    let notv = reward.join("reward_head_notv.ckpt");
    let eval = ok(
        out,
        &[
            "eval",
            "--reward-head",
            head.to_str().unwrap(),
            "--reward-head-notv",
            notv.to_str().unwrap(),
            "--rl-metrics",
            metrics.to_str().unwrap(),
        ],
        true,
    );
    let summary = fs::read_to_string(eval.join("eval.csv")).unwrap();
    for key in [
        "mean_score_realistic-analog",
        "mean_score_synthetic-analog",
        "auc",
        "near_duplicate_std_ratio",
        "run0_heldout_change",
    ] {
        assert!(summary.contains(key), "{key} missing from {summary}");
    }
    assert_eq!(fs::read_to_string(eval.join("realism_curve.csv")).unwrap().lines().count(), 1 + 2);
}
