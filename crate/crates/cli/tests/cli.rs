use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmst_core::model::{Checkpoint, Model, RunConfig};
use dmst_core::pgm::PgmImage;
use tempfile::TempDir;

const SMALL: &str = "\
seed = 3
model.depth = 2
model.dim = 16
model.heads = 2
model.topk = 2
model.image_size = 8
model.patch_size = 2
model.token_dim = 8
model.num_classes = 2
data.num_classes = 2
data.dim = 8
data.subspace_dim = 2
data.tokens = 16
data.samples_per_class = 10
train.epochs = 2
train.batch_size = 4
";

fn dmst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmst"))
        .args(args)
        .env_remove("DMST_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.cfg");
    fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = small_config(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let res = dmst(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let out = train_small(tmp.path(), "run", &["--epochs", "0"]);
    let ckpt = Checkpoint::load(out.join("checkpoint.dmst")).unwrap();
    let init = Model::init(&ckpt.config.model).unwrap();
    let loaded = ckpt.to_model().unwrap();
    for (a, b) in loaded.params().iter().zip(init.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, (*y as f32) as f64);
        }
    }
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), "epoch,split,loss,accuracy\n");
}

#[test]
fn missing_config_names_the_path() {
    let res = dmst(&["train", "--config", "/nonexistent/run.cfg", "--out", "/tmp/unused"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("/nonexistent/run.cfg"));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "model.colour = blue\n").unwrap();
    let res = dmst(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("model.colour"));
}

#[test]
fn reruns_with_a_fixed_seed_are_identical() {
    let tmp = TempDir::new().unwrap();
    let a = train_small(tmp.path(), "a", &["--seed", "11"]);
    let b = train_small(tmp.path(), "b", &["--seed", "11"]);
    let csv = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(csv.iter().filter(|&&c| c == b'\n').count(), 1 + 2 * 2);
    assert_eq!(
        fs::read(a.join("checkpoint.dmst")).unwrap(),
        fs::read(b.join("checkpoint.dmst")).unwrap()
    );
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("env");
    let res = Command::new(env!("CARGO_BIN_EXE_dmst"))
        .args(["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "0"])
        .env("DMST_SEED", "42")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(Checkpoint::load(out.join("checkpoint.dmst")).unwrap().config.seed(), 42);
}

#[test]
fn verify_reports_per_check_results() {
    let res = dmst(&["verify", "--suite", "sparsify"]);
    assert_eq!(code(&res), 0);
    let text = stdout(&res);
    assert!(text.contains("[PASS] soft threshold vs bisection oracle: 10000/10000"), "{text}");

    let res = dmst(&["verify", "--suite", "gradients"]);
    assert_eq!(code(&res), 0);
    let text = stdout(&res);
    assert!(text.contains("rel error"));
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count() >= 50, true);

    assert_eq!(code(&dmst(&["verify", "--suite", "everything"])), 2);
}

#[test]
fn rates_on_an_untrained_model() {
    let tmp = TempDir::new().unwrap();
    let out = train_small(tmp.path(), "run", &["--epochs", "0"]);
    let ckpt = out.join("checkpoint.dmst");
    let csv = tmp.path().join("rates.csv");
    let res = dmst(&["rates", "--checkpoint", s(&ckpt), "--samples", "1", "--csv", s(&csv)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,rate"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));

    let res = dmst(&["rates", "--checkpoint", s(&ckpt), "--samples", "0", "--csv", s(&csv)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn rates_reject_mismatched_inputs() {
    let tmp = TempDir::new().unwrap();
    let out = train_small(tmp.path(), "run", &["--epochs", "0"]);
    let ckpt = out.join("checkpoint.dmst");
    let csv = tmp.path().join("rates.csv");

    // images of the wrong size for the model
    let images = tmp.path().join("images");
    fs::create_dir_all(images.join("a")).unwrap();
    PgmImage::new(5, 5, vec![0; 25]).unwrap().write(images.join("a/x.pgm")).unwrap();
    let res = dmst(&["rates", "--checkpoint", s(&ckpt), "--data", s(&images), "--csv", s(&csv)]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));

    // truncated checkpoint
    let bytes = fs::read(&ckpt).unwrap();
    let cut = tmp.path().join("cut.dmst");
    fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
    let res = dmst(&["rates", "--checkpoint", s(&cut), "--csv", s(&csv)]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("bytes"));
}

#[test]
fn membership_maps_are_readable_pgm_files() {
    let tmp = TempDir::new().unwrap();
    let out = train_small(tmp.path(), "run", &[]);
    let ckpt = out.join("checkpoint.dmst");
    let maps = tmp.path().join("maps");
    let res = dmst(&[
        "membership", "--checkpoint", s(&ckpt), "--input", "synthetic:0", "--layer", "1", "--out", s(&maps),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for head in 0..2 {
        let bytes = fs::read(maps.join(format!("head_{head}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let img = PgmImage::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (4, 4, 255));
        assert_eq!(img.pixels.len(), 16);
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(maps.join("membership.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(json[0]["values"].as_array().unwrap().len(), 16);

    // token rows from a CSV file
    let tokens: String = (0..16)
        .map(|j| (0..8).map(|i| format!("{}", ((i * 16 + j) as f64 * 0.1).sin())).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let csv = tmp.path().join("tokens.csv");
    fs::write(&csv, tokens).unwrap();
    let res = dmst(&["membership", "--checkpoint", s(&ckpt), "--input", s(&csv), "--layer", "0", "--out", s(&maps)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let res = dmst(&[
        "membership", "--checkpoint", s(&ckpt), "--input", "synthetic:0", "--layer", "2", "--out", s(&maps),
    ]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("layer 2"));
}

fn profile(op: &str, tokens: &str, csv: &Path) -> Vec<(usize, usize)> {
    let res = dmst(&["profile", "--op", op, "--tokens", tokens, "--csv", s(csv)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,tokens,peak_floats"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[0], op);
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn profile_ratios_per_doubling() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("p.csv");
    let m = profile("mhsa", "1024,2048", &csv);
    let r = m[1].1 as f64 / m[0].1 as f64;
    assert!((3.5..=4.5).contains(&r), "mhsa {r}");
    let d = profile("dmsa", "1024,2048", &csv);
    let r = d[1].1 as f64 / d[0].1 as f64;
    assert!((1.8..=2.2).contains(&r), "dmsa {r}");

    assert_eq!(code(&dmst(&["profile", "--op", "mhsa", "--tokens", "", "--csv", s(&csv)])), 2);
    assert_eq!(code(&dmst(&["profile", "--op", "linear", "--tokens", "8", "--csv", s(&csv)])), 2);
}

#[test]
fn ablation_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let results = tmp.path().join("ablation.csv");
    for act in ["st", "sigmoid", "relu", "gelu"] {
        let res = dmst(&[
            "ablate", "--axis", "both", "--activation", act, "--config", s(&cfg), "--results", s(&results),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let text = fs::read_to_string(&results).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("variant,axis,activation"));
    let rows: std::collections::HashSet<&str> = lines[1..].iter().copied().collect();
    assert_eq!(rows.len(), 4);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[0], "TPSUSA");
        for acc in [f[5], f[6]] {
            let a: f64 = acc.parse().unwrap();
            assert!((0.0..=1.0).contains(&a));
        }
    }

    assert_eq!(
        code(&dmst(&["ablate", "--axis", "channel", "--activation", "st", "--config", s(&cfg)])),
        2
    );
}

#[test]
fn head_axis_soft_threshold_ablation_is_default_training() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let trained = train_small(tmp.path(), "train", &[]);
    let ablated = tmp.path().join("ablate");
    let res = dmst(&[
        "ablate", "--axis", "head", "--activation", "st", "--config", s(&cfg), "--out", s(&ablated), "--results",
        s(&tmp.path().join("r.csv")),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let a = Checkpoint::load(trained.join("checkpoint.dmst")).unwrap();
    let b = Checkpoint::load(ablated.join("checkpoint.dmst")).unwrap();
    assert_eq!(a.config, b.config);
    assert_eq!(a.config.model.sparsity_axis, RunConfig::default().model.sparsity_axis);
    assert_eq!(
        fs::read(trained.join("metrics.csv")).unwrap(),
        fs::read(ablated.join("metrics.csv")).unwrap()
    );
}
