use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = "parts = 4\nheight = 24\nwidth = 24\ntrain = 12\ntest = 4\nseed = 3\n";
const CONFIG: &str = "K = 4\nbatch_size = 3\nsteps = 3\nresolution = 0.5\nprovider_layers = [\"block3\"]\n";

fn partscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partscope")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A generated dataset and a trained checkpoint inside `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = dir.join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    let o = partscope(&["synth-generate", "--spec", arg(&spec), "--out", arg(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    let config = dir.join("train.toml");
    fs::write(&config, CONFIG).unwrap();
    let run = dir.join("run");
    let o = partscope(&["train", "--config", arg(&config), "--data", arg(&manifest), "--out", arg(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (manifest, run.join("checkpoint.pseg"))
}

fn report_keys(path: &Path) -> Vec<String> {
    let table: toml::Table = toml::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let mut keys: Vec<String> = table.keys().cloned().collect();
    keys.sort();
    keys
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = partscope(&["synth-generate", "--spec", arg(&spec), "--out", arg(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("manifest.tsv").exists());
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn missing_or_bad_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = partscope(&["synth-generate", "--spec", arg(&missing), "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "parts = 4\nwidht = 10\n").unwrap();
    let o = partscope(&["synth-generate", "--spec", arg(&bad), "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = partscope(&["synth-generate", "--spec", arg(&spec), "--out", arg(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_eval_visualize_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, checkpoint) = fixture(dir.path());
    let losses = fs::read_to_string(checkpoint.with_file_name("losses.csv")).unwrap();
    assert_eq!(losses.lines().next(), Some("step,loss_total,loss_f,loss_c,loss_v,loss_e"));
    assert_eq!(losses.lines().count(), 4);

    let report = dir.path().join("eval.toml");
    let o = partscope(&["eval", "--checkpoint", arg(&checkpoint), "--data", arg(&manifest), "--split", "test", "--report", arg(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_keys(&report), ["ari", "fg_ari", "fg_nmi", "kp_error", "nmi"]);
    let values: toml::Table = toml::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(values.values().all(|v| v.as_float().unwrap().is_finite()));

    let mid = dir.path().join("mid.toml");
    let o = partscope(&["baseline", "--kind", "midpoint", "--data", arg(&manifest), "--report", arg(&mid)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_keys(&mid), ["kp_error"]);

    let km = dir.path().join("km.toml");
    let o = partscope(&["baseline", "--kind", "kmeans", "--data", arg(&manifest), "--report", arg(&km)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_keys(&km), ["ari", "fg_ari", "fg_nmi", "kp_error", "nmi"]);

    let single = dir.path().join("single.toml");
    let o = partscope(&["baseline", "--kind", "single-kp", "--keypoint", "1", "--data", arg(&manifest), "--report", arg(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_keys(&single), ["kp_error"]);

    let figures = dir.path().join("fig");
    let o = partscope(&["visualize", "--checkpoint", arg(&checkpoint), "--data", arg(&manifest), "--out", arg(&figures), "--n", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&figures).unwrap().count(), 4);

    let none = dir.path().join("none");
    let o = partscope(&["visualize", "--checkpoint", arg(&checkpoint), "--data", arg(&manifest), "--out", arg(&none), "--n", "0"]);
    assert!(o.status.success());
    assert!(!none.exists());
}

#[test]
fn config_and_checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let o = partscope(&["synth-generate", "--spec", arg(&spec), "--out", arg(&dir.path().join("data"))]);
    let manifest = String::from_utf8(o.stdout).unwrap().trim().to_string();

    let config = dir.path().join("c.toml");
    fs::write(&config, "batch_size = 1\nsteps = 1\nresolution = 0.5\n").unwrap();
    let o = partscope(&["train", "--config", arg(&config), "--data", &manifest, "--out", arg(&dir.path().join("r1"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    fs::write(&config, "batch_size = 1\nsteps = 1\nresolution = 0.5\nlambda_contrastive = 0.0\n").unwrap();
    let o = partscope(&["train", "--config", arg(&config), "--data", &manifest, "--out", arg(&dir.path().join("r2"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = partscope(&[
        "eval",
        "--checkpoint",
        arg(&dir.path().join("missing.pseg")),
        "--data",
        &manifest,
        "--report",
        arg(&dir.path().join("r.toml")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = partscope(&["baseline", "--kind", "bogus", "--data", &manifest, "--report", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

/// A PFEA file whose values overflow once squared.
fn huge_features() -> Vec<u8> {
    let (d, h, w) = (2u32, 3u32, 3u32);
    let mut bytes = b"PFEA".to_vec();
    for v in [1, d, h, w] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..d * h * w {
        let v = if i % 2 == 0 { 1e200f64 } else { -1e200 };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

#[test]
fn non_finite_loss_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let o = partscope(&["synth-generate", "--spec", arg(&spec), "--out", arg(&dir.path().join("data"))]);
    let manifest = String::from_utf8(o.stdout).unwrap().trim().to_string();
    let features = dir.path().join("features");
    fs::create_dir(&features).unwrap();
    for line in fs::read_to_string(&manifest).unwrap().lines().filter(|l| !l.starts_with('#')) {
        let id = line.split('\t').next().unwrap();
        fs::write(features.join(format!("{id}.pfea")), huge_features()).unwrap();
    }
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        format!("steps = 5\nbatch_size = 4\nresolution = 0.5\nprovider = \"precomputed-file\"\nprovider_directory = {:?}\n", arg(&features)),
    )
    .unwrap();
    let o = partscope(&["train", "--config", arg(&config), "--data", &manifest, "--out", arg(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("loss_f"), "{}", stderr(&o));
}
