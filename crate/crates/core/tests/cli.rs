use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lodom::nn::checkpoint;
use lodom::model::Model;
use lodom::Config;

fn lodom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lodom")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(root: &Path, frames: usize) {
    let out = lodom(&["synth", "--out", s(root), "--frames", &frames.to_string(), "--points", "300", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn desk_checkpoint(path: &Path) {
    checkpoint::save(path, &Model::new(Config::desk()).unwrap().checkpoint(0)).unwrap();
}

#[test]
fn synth_writes_kitti_layout() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 4);
    let scans = dir.path().join("sequences/00/velodyne");
    assert_eq!(fs::read_dir(&scans).unwrap().count(), 4);
    assert_eq!(fs::metadata(scans.join("000000.bin")).unwrap().len(), 300 * 16);
    let poses = fs::read_to_string(dir.path().join("poses/00.txt")).unwrap();
    assert_eq!(poses.lines().count(), 4);
    assert!(poses.lines().all(|l| l.split_whitespace().count() == 12));
}

#[test]
fn infer_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5);
    let ckpt = dir.path().join("m.ckpt");
    desk_checkpoint(&ckpt);
    let cached = dir.path().join("est.txt");
    let uncached = dir.path().join("est_nocache.txt");
    for (out, extra) in [(&cached, None), (&uncached, Some("--no-cache"))] {
        let mut args = vec!["infer", "--data", s(dir.path()), "--checkpoint", s(&ckpt), "--out", s(out)];
        args.extend(extra);
        let o = lodom(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let est = fs::read(&cached).unwrap();
    assert_eq!(est, fs::read(&uncached).unwrap());
    assert_eq!(String::from_utf8(est).unwrap().lines().count(), 5);

    let gt = dir.path().join("poses/00.txt");
    let o = lodom(&["eval", "--gt", s(&gt), "--est", s(&cached)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rte_pct,rre_deg_per_100m,ate_m,rpe_t_m,rpe_r_deg");
    assert!(lines[1].starts_with(",,"), "short path leaves RTE/RRE empty: {}", lines[1]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));

    let o = lodom(&["eval", "--gt", s(&gt), "--est", s(&gt), "--metrics", "ate"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), zero_ate_csv());
}

fn zero_ate_csv() -> String {
    let gt = vec![lodom::RigidTransform::IDENTITY; 2];
    let (h, r, _) = lodom::eval::csv_row(&gt, &gt, &[lodom::eval::Metric::Ate]).unwrap();
    format!("{h}\n{r}\n")
}

#[test]
fn infer_failure_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    desk_checkpoint(&ckpt);
    let empty = dir.path().join("nothing");
    fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("est.txt");
    let o = lodom(&["infer", "--data", s(&empty), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    synth(dir.path(), 3);
    let o = lodom(&["infer", "--data", s(dir.path()), "--checkpoint", s(&empty.join("missing")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(lodom(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lodom(&["eval", "--gt", "x"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    fs::write(&gt, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
    let o = lodom(&["eval", "--gt", s(&gt), "--est", s(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    let o = lodom(&["eval", "--gt", s(&gt), "--est", s(&gt), "--metrics", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_a_resumable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 4);
    let mut cfg = Config::desk();
    cfg.train.max_steps = 2;
    cfg.train.epochs = 1;
    cfg.train.sequences = vec![lodom::config::SequenceSource {
        scans: dir.path().join("sequences/00/velodyne"),
        poses: dir.path().join("poses/00.txt"),
        calib: None,
    }];
    let cfg_path = dir.path().join("c.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = lodom(&["train", "--config", s(&cfg_path), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("epoch"));
    let model = Model::from_checkpoint(&checkpoint::load(&ckpt).unwrap()).unwrap();
    assert_eq!(model.params.step_count(), 2);

    let mut other = cfg.clone();
    other.seed = 9;
    fs::write(&cfg_path, other.to_toml()).unwrap();
    let o = lodom(&["train", "--config", s(&cfg_path), "--out", s(&ckpt), "--resume", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_single_module() {
    let o = lodom(&["gradcheck", "--module", "loss"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("loss") && text.contains("PASS"));
    assert_eq!(lodom(&["gradcheck", "--module", "nope"]).status.code(), Some(2));
}
