use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gaussproto"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &str = r#"
[model]
num_blocks = 2
reduced_channels = 4
prototypes_per_class = 2

[region]
proposals = 12
hidden = 4
latent = 3

[schedule]
autoencoder_epochs = 2
gmm_epochs = 3
head_epochs = 3
joint_epochs = 2
batch_images = 4
train_proposals = 8

[baseline]
superpixels = 20
epochs = 20
"#;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny dataset plus config file under `dir`.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let cfg = dir.join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(&[
        "--config", p(&cfg), "--seed", "3", "--out", p(&data), "generate-data", "--train", "6", "--val", "3", "--size", "16",
    ]);
    (data, cfg)
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_data_is_deterministic_with_binary_masks() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&["--seed", "7", "--out", p(d), "generate-data", "--train", "6", "--val", "4", "--size", "16"]);
    }
    // The echoed config names its own output directory.
    let data_only = |d: &Path| tree(d).into_iter().filter(|(n, _)| n != Path::new("config.toml")).collect::<Vec<_>>();
    let (ta, tb) = (data_only(a.path()), data_only(b.path()));
    assert_eq!(ta, tb);
    assert_eq!(ta.iter().filter(|(n, _)| n.starts_with("images")).count(), 10);
    for (name, _) in ta.iter().filter(|(n, _)| n.starts_with("masks")) {
        let m = image::open(a.path().join(name)).unwrap().to_luma8();
        assert!(m.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
    }
    assert!(a.path().join("config.toml").exists());
}

#[test]
fn train_eval_segment_explain_round() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    for r in [&run1, &run2] {
        ok(&["--config", p(&cfg), "--seed", "5", "--out", p(r), "train", "--dataset", p(&data)]);
    }
    assert_eq!(fs::read(run1.join("model.ckpt")).unwrap(), fs::read(run2.join("model.ckpt")).unwrap());
    let csv = fs::read_to_string(run1.join("losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,epoch,L_GMM,L_clf,L1,L"));
    let stages: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for s in ["1", "2", "3", "4"] {
        assert!(stages.contains(&s));
    }

    // Re-running from the echoed config reproduces the checkpoint.
    let echoed = run1.join("config.toml");
    let run3 = dir.path().join("run3");
    ok(&["--config", p(&echoed), "--out", p(&run3), "train"]);
    assert_eq!(fs::read(run1.join("model.ckpt")).unwrap(), fs::read(run3.join("model.ckpt")).unwrap());

    let ckpt = run1.join("model.ckpt");
    let ev = dir.path().join("eval");
    ok(&[
        "--config", p(&cfg), "--baseline", "--out", p(&ev), "eval", "--checkpoint", p(&ckpt), "--dataset", p(&data),
    ]);
    for f in ["metrics.json", "baseline_metrics.json"] {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(ev.join(f)).unwrap()).unwrap();
        for k in ["Mean IoU", "Class IoU", "Pixel Accuracy", "Class Accuracy"] {
            let x = v[k].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x), "{f} {k} = {x}");
        }
    }

    let seg = dir.path().join("seg");
    let img = data.join("images").join("img_00000.png");
    ok(&["--out", p(&seg), "segment", "--checkpoint", p(&ckpt), "--image", p(&img)]);
    let mask = image::open(seg.join("img_00000_mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (16, 16));
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
    assert!(seg.join("img_00000_overlay.png").exists());

    let ex1 = dir.path().join("ex1");
    let ex2 = dir.path().join("ex2");
    for e in [&ex1, &ex2] {
        ok(&["--out", p(e), "explain", "--checkpoint", p(&ckpt), "--dataset", p(&data)]);
    }
    let report = fs::read(ex1.join("gallery").join("report.json")).unwrap();
    assert_eq!(report, fs::read(ex2.join("gallery").join("report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let protos = v["prototypes"].as_array().unwrap();
    assert_eq!(protos.len(), 4);
    for pr in protos {
        let b: Vec<u64> = pr["region"]["bbox"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
        assert!(b[0] < b[2] && b[1] < b[3] && b[2] <= 16 && b[3] <= 16);
        assert!(ex1.join("gallery").join(pr["crop"].as_str().unwrap()).exists());
    }
    assert!(ex1.join("gallery").join("index.png").exists());
}

#[test]
fn protobb_trains_and_segments() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let run = dir.path().join("bb");
    ok(&["--config", p(&cfg), "--model", "protobb", "--out", p(&run), "train", "--dataset", p(&data)]);
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("kind = \"protobb\""));
    let seg = dir.path().join("seg");
    let img = data.join("images").join("img_00001.png");
    ok(&["--out", p(&seg), "segment", "--checkpoint", p(&run.join("model.ckpt")), "--image", p(&img)]);
    assert!(seg.join("img_00001_mask.png").exists());
}

#[test]
fn validation_failures_exit_nonzero_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let gone = data.join("masks").join("img_00002.png");
    fs::remove_file(&gone).unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["--config", p(&cfg), "--out", p(&out_dir), "train", "--dataset", p(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("img_00002.png"));
    assert!(!out_dir.exists());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[schedule]\nepochz = 3\n").unwrap();
    let out = run(&["--config", p(&bad), "--out", p(&out_dir), "train", "--dataset", p(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let out = run(&["--out", p(&out_dir), "eval", "--dataset", p(&data)]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
}


#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("GAUSSPROTO_THREADS", "zero")
        .args(["--out", p(dir.path()), "generate-data", "--train", "1", "--val", "0", "--size", "8"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("GAUSSPROTO_THREADS"));
    let out = bin()
        .env("GAUSSPROTO_THREADS", "1")
        .args(["--out", p(dir.path()), "generate-data", "--train", "1", "--val", "0", "--size", "8"])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn larger_images_train_on_crops_and_segment_tiled() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let cfg = dir.path().join("crop.toml");
    fs::write(&cfg, TINY.replace("[model]\n", "[model]\ninput_size = 8\n")).unwrap();
    let run = dir.path().join("run");
    ok(&["--config", p(&cfg), "--out", p(&run), "train", "--dataset", p(&data)]);
    let summary = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(summary.contains("input_size = 8"));
    ok(&["--config", p(&cfg), "--out", p(&run), "eval", "--dataset", p(&data)]);
    let img = data.join("images").join("img_00000.png");
    ok(&["--out", p(&run), "segment", "--image", p(&img)]);
    let mask = image::open(run.join("img_00000_mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (16, 16));
    ok(&["--config", p(&cfg), "--out", p(&run), "explain", "--dataset", p(&data)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(run.join("gallery").join("report.json")).unwrap()).unwrap();
    for pr in v["prototypes"].as_array().unwrap() {
        assert!(pr["image_name"].as_str().unwrap().contains('@'));
    }
}
