use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ifwm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifwm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run ifwm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny dataset plus a tiny training config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.cfg"), "count = 4\nheight = 64\nwidth = 64\nseed = 9\n").unwrap();
    fs::write(
        dir.path().join("train.cfg"),
        "manifest = data/manifest.tsv\nout_dir = run\nvariant = ifwm\n\
         stem_channels = 4\nbranch_widths = 4,6,8,8\nblocks_per_stage = 1\nfusion_stages = 1\n\
         epochs = 2\nbatch_size = 4\ntile_size = 32\ntile_stride = 32\nval_fraction = 0.25\n",
    )
    .unwrap();
    let o = ifwm(&["gen-data", "--config", "data.cfg", "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("wrote 4 scenes"));
    dir
}

#[test]
fn gen_data_writes_manifest_and_rasters() {
    let dir = workspace();
    let manifest = fs::read_to_string(dir.path().join("data/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert!(manifest.starts_with("scene_000.image.rast\tscene_000.labels.rast"));
    assert!(dir.path().join("data/scene_003.labels.rast").exists());
}

#[test]
fn deterministic_training_is_bit_identical() {
    let dir = workspace();
    for out in ["a", "b"] {
        let o = ifwm(&["train", "--config", "train.cfg", "--deterministic", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("epoch,lr,loss,PA,mIoU\n"));
    }
    for f in ["train_log.csv", "final.ckpt", "best.ckpt"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    // scoring the checkpoint with its own config works, with another fusion
    // method it fails and names the mismatching tensors
    let ok = ifwm(
        &["eval", "--config", "train.cfg", "--checkpoint", "a/final.ckpt", "--out", "a", "--dump-pred", "pred"],
        dir.path(),
    );
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).starts_with("class,precision,recall,f1,iou\n"));
    assert!(dir.path().join("a/metrics.csv").exists());
    assert!(dir.path().join("pred/pred_000.pgm").exists());
    let bad = ifwm(
        &["eval", "--config", "train.cfg", "--checkpoint", "a/final.ckpt", "--variant", "sf"],
        dir.path(),
    );
    assert!(!bad.status.success());
    let err = stderr(&bad);
    assert!(err.contains("missing: stage0.fuse.0_from_1.joint_conv.weight"), "{err}");
    assert!(err.contains("unexpected: stage0.fuse.0_from_1.region_conv.weight"), "{err}");
}

#[test]
fn oracle_eval_scores_one() {
    let dir = workspace();
    let o = ifwm(&["eval", "--config", "train.cfg", "--oracle", "--split", "all"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("mIoU,1.000000"), "{out}");
    assert!(out.contains("PA,1.000000"), "{out}");
}

#[test]
fn gradcheck_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ifwm(&["gradcheck", "--seeds", "2", "--only", "relu,add"], dir.path());
    assert!(ok.status.success());
    assert!(stdout(&ok).ends_with("2 checks, 0 failed\n"));
    let bad = ifwm(&["gradcheck", "--seeds", "2", "--only", "relu", "--inject-fault", "relu"], dir.path());
    assert!(!bad.status.success());
    let out = stdout(&bad);
    assert!(out.contains("relu") && out.contains("FAIL"), "{out}");
    let unknown = ifwm(&["gradcheck", "--only", "nope"], dir.path());
    assert!(!unknown.status.success());
    assert!(stderr(&unknown).contains("nope"));
}

#[test]
fn missing_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = ifwm(&["train", "--config", "absent.cfg"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.cfg"));
}
