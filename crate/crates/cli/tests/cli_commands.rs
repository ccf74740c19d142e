use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfm_cli::manifest::RunManifest;
use lfm_core::autograd::Tensor;
use lfm_core::data::{read_ppm, write_tensor_dataset};

const TOY: &str = "# tiny ring run\nz_dim = 4\nhidden = 16\nfeature_dim = 8\nbatch_size = 16\niterations = 12\neval_every = 6\neval_n = 64\nref_n = 256\nwall_clock = false\n";

fn lfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfm")).args(args).env_remove("LFM_SEED").output().expect("spawn lfm")
}

fn lfm_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfm")).args(args).env(key, value).output().expect("spawn lfm")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("toy.txt");
    fs::write(&p, format!("{TOY}{extra}")).unwrap();
    p
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
        .unwrap()
}

#[test]
fn train_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "seed = 3\n");
    let out = dir.path().join("run");
    let o = lfm(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "metrics.csv", "losses.svg", "fid.svg", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let header = fs::read_to_string(out.join("metrics.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "iteration,loss_d,loss_g,lfm_value,d_real_mean,d_fake_mean,fid,wall_ms");
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.seed, 3);
    assert!(m.files.iter().all(|f| out.join(&f.path).exists()));
    assert!(m.files.iter().any(|f| f.path == "metrics.csv"));
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "learning_rte = 0.1\n");
    let o = lfm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));

    let cfg = toy_config(dir.path(), "");
    let o = lfm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r")), "--bogus-flag", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_flag"), "{}", stderr(&o));

    let o = lfm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r")), "--set", "batch_size=zero"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = lfm(&["train", "--config", s(&dir.path().join("nope.txt")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = lfm(&["sample", "--checkpoint", s(&dir.path().join("nope.lfmg")), "--out", s(&dir.path().join("s"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("env");
    let o = lfm_env(&["train", "--config", s(&cfg), "--out", s(&out), "--iterations", "2", "--eval-every", "0"], "LFM_SEED", "41");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(config_value(&out, "seed"), "41");

    // An explicit seed wins over the environment.
    let out = dir.path().join("flag");
    let o = lfm_env(&["train", "--config", s(&cfg), "--out", s(&out), "--iterations", "2", "--eval-every", "0", "--seed", "5"], "LFM_SEED", "41");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(config_value(&out, "seed"), "5");

    let o = lfm_env(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("bad"))], "LFM_SEED", "many");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_continues_and_rejects_structural_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "seed = 2\n");
    let straight = dir.path().join("straight");
    assert!(lfm(&["train", "--config", s(&cfg), "--out", s(&straight)]).status.success());
    let part = dir.path().join("part");
    assert!(lfm(&["train", "--config", s(&cfg), "--out", s(&part), "--iterations", "6"]).status.success());
    let ckpt = part.join("checkpoints/final.lfmg");
    let o = lfm(&["train", "--resume", s(&ckpt), "--out", s(&part), "--iterations", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(straight.join("metrics.csv")).unwrap(), fs::read(part.join("metrics.csv")).unwrap());

    let o = lfm(&["train", "--resume", s(&ckpt), "--out", s(&part), "--z-dim", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("z_dim"), "{}", stderr(&o));
}

#[test]
fn pairs_are_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let report = dir.path().join("probe.csv");
    for p in [&a, &b] {
        let o = lfm(&["pairs", "--z-dim", "12", "--count", "50", "--seed", "8", "--trials", "10000", "--out", s(p), "--report", s(&report)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 101);
    assert!(lines[0].starts_with("pair,member,v0,"));
    for row in &lines[1..] {
        let c: Vec<&str> = row.split(',').collect();
        assert_eq!(c.len(), 14);
        if c[1] == "b" {
            assert!(c[13].parse::<f64>().unwrap().abs() <= 1.0);
        }
    }
    let probe = fs::read_to_string(&report).unwrap();
    assert!(probe.starts_with("variant,z_dim,trials,rejected,rate,ci_low,ci_high,ci_width"));
    assert_eq!(probe.lines().count(), 3);

    let o = lfm(&["pairs", "--variant", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sample_writes_images_in_range_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("images.lfmd");
    let imgs = Tensor::from_fn(vec![8, 3, 16, 16], |i| ((i * 31) % 200) as f64 / 100.0 - 1.0);
    write_tensor_dataset(&data, &imgs).unwrap();
    let cfg = toy_config(
        dir.path(),
        &format!("dataset = raw:{}\nimage_size = 16\nbase_channels = 4\nz_dim = 8\nbatch_size = 4\niterations = 3\neval_every = 0\n", data.display()),
    );
    let run = dir.path().join("run");
    let o = lfm(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("checkpoints/final.lfmg");

    let mut outputs = Vec::new();
    for name in ["s1", "s2"] {
        let out = dir.path().join(name);
        let o = lfm(&["sample", "--checkpoint", s(&ckpt), "--n", "16", "--seed", "4", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut ppms: Vec<PathBuf> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "ppm")).collect();
        ppms.sort();
        assert_eq!(ppms.len(), 16);
        let img = read_ppm(&ppms[0]).unwrap();
        assert_eq!((img.width, img.height), (16, 16));
        let raw = lfm_core::data::read_tensor_dataset(&out.join("samples.lfmd")).unwrap();
        assert_eq!(raw.len(), 16);
        assert!(raw.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(RunManifest::read(&out.join("manifest.json")).unwrap().files.iter().all(|f| out.join(&f.path).exists()));
        outputs.push(fs::read(out.join("samples.lfmd")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn fid_matches_closed_form_through_cached_stats() {
    let dir = tempfile::tempdir().unwrap();
    // Four points with diagonal covariance 2/3 (unbiased); b scales axes by 2 and 3 and shifts by (1, 2).
    let a = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
    let b = Tensor::new(vec![4, 2], vec![3.0, 2.0, -1.0, 2.0, 1.0, 5.0, 1.0, -1.0]).unwrap();
    let (pa, pb) = (dir.path().join("a.lfmd"), dir.path().join("b.lfmd"));
    write_tensor_dataset(&pa, &a).unwrap();
    write_tensor_dataset(&pb, &b).unwrap();
    let stats = dir.path().join("a.stats");
    let o = lfm(&["stats", "--dataset", &format!("raw:{}", pa.display()), "--out", s(&stats), "--extractor", "identity"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = dir.path().join("fid.csv");
    let run = |samples: &Path| {
        let o = lfm(&[
            "fid", "--samples", &format!("raw:{}", samples.display()), "--ref-stats", s(&stats),
            "--extractor", "identity", "--n", "4", "--csv", s(&csv),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).trim().parse::<f64>().unwrap()
    };
    assert!(run(&pa).abs() <= 1e-10);
    let c = 2.0 / 3.0;
    let expect = 1.0 + 4.0 + c * (1.0 + 1.0 + 4.0 + 9.0 - 2.0 * (2.0 + 3.0));
    let got = run(&pb);
    assert!((got - expect).abs() <= 1e-10, "{got} vs {expect}");
    let rows = fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("source,reference,extractor,n,fid"));
    assert_eq!(rows.lines().count(), 3);

    let o = lfm(&["fid", "--samples", &format!("raw:{}", pb.display()), "--ref-stats", s(&stats), "--extractor", "random_cnn:3", "--n", "4"]);
    assert_ne!(o.status.code(), Some(0));
}
