use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ticketlab::checkpoint::{params_checksum, Checkpoint};
use ticketlab::output::{RunManifest, OUTPUT_ENV};
use ticketlab_core::Role;

const MINIMAL: &str = r#"
[model]
hidden_dims = [8]
norm_kind = "batch_norm"

[data]
source = "spirals"
n = 300

[pipeline]
kinds = ["aws"]
iterations = 1
warmup = { epochs = 1 }
iteration = { epochs = 1 }
final = { epochs = 2 }

[[transfer.arms]]
name = "aws"
source = "aws"
"#;

fn ticketlab(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ticketlab"));
    cmd.args(args);
    if let Some(o) = out {
        cmd.env(OUTPUT_ENV, o);
    }
    cmd.output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Runs the minimal recipe once; returns (tempdir guard, output root).
fn minimal_run() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("minimal.toml");
    std::fs::write(&cfg, MINIMAL).unwrap();
    let out = dir.path().join("out");
    let o = ticketlab(&["run", cfg.to_str().unwrap()], Some(&out));
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    (dir, out)
}

fn data_flags() -> Vec<&'static str> {
    vec!["--source", "spirals", "--n", "300"]
}

#[test]
fn minimal_run_writes_a_verified_manifest() {
    let (_g, out) = minimal_run();
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.files.len() >= 4, "{:?}", manifest.files);
    manifest.verify(&out).unwrap();
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("arm,trial,epoch,train_loss,train_acc,test_acc\n"));
    assert_eq!(metrics.lines().count(), 1 + 2);
    assert!(!metrics.contains('\r'));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, format!("{MINIMAL}\n[seeds]\nmystery = 1\n")).unwrap();
    let o = ticketlab(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("mystery") && err.contains("line"), "{err}");

    let negative = MINIMAL.replace("iterations = 1", "iterations = 1\nprune_rate = -0.2");
    std::fs::write(&cfg, negative).unwrap();
    let o = ticketlab(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("prune_rate"));

    let o = ticketlab(&["run", dir.path().join("absent.toml").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn barrier_command() {
    let (g, out) = minimal_run();
    let ckpt = out.join("arms/aws/trial0/solution.ckpt");
    let csv = g.path().join("b.csv");
    let mut args = vec!["barrier", ckpt.to_str().unwrap(), ckpt.to_str().unwrap(), "--grid", "9"];
    args.extend(data_flags());
    args.extend(["--out", csv.to_str().unwrap()]);
    let o = ticketlab(&args, None);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("sup_barrier 0\n"), "{}", text(&o.stdout));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 9);

    // a pipeline checkpoint of a different model
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("wide.toml");
    std::fs::write(&cfg, MINIMAL.replace("[8]", "[9]")).unwrap();
    let other = dir.path().join("out");
    assert_eq!(ticketlab(&["run", cfg.to_str().unwrap()], Some(&other)).status.code(), Some(0));
    let other_ckpt = other.join("arms/aws/trial0/solution.ckpt");
    let mut args = vec!["barrier", ckpt.to_str().unwrap(), other_ckpt.to_str().unwrap()];
    args.extend(data_flags());
    let o = ticketlab(&args, None);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    let a = ticketlab::checkpoint::layout_digest(Checkpoint::load(&ckpt).unwrap().spec());
    let b = ticketlab::checkpoint::layout_digest(Checkpoint::load(&other_ckpt).unwrap().spec());
    assert!(err.contains(&a) && err.contains(&b), "{err}");
}

fn transfer(pipeline: &Path, mode: &str, out: &Path) -> Output {
    let mut args = vec!["transfer", pipeline.to_str().unwrap(), "--mode", mode, "--fresh-seed", "7", "--epochs", "2"];
    args.extend(data_flags());
    args.extend(["--out", out.to_str().unwrap()]);
    ticketlab(&args, None)
}

#[test]
fn transfer_command() {
    let (g, out) = minimal_run();
    let pipeline = out.join("pipelines/aws/trial0.ckpt");
    let source = Checkpoint::load(&pipeline).unwrap();
    let signs = source.signs.clone().unwrap();

    let dir = g.path().join("signed");
    let o = transfer(&pipeline, "signed_init", &dir);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let sol = Checkpoint::load(&dir.join("solution.ckpt")).unwrap();
    for (i, v) in sol.params.values().iter().enumerate() {
        if signs.signs()[i] == 0 && sol.params.layout().roles()[i] == Role::Weight {
            assert_eq!(*v, 0.0, "entry {i} outside the signed support");
        }
    }
    assert!(std::fs::read_to_string(dir.join("metrics.csv")).unwrap().lines().count() == 3);

    let dir = g.path().join("sub");
    let o = transfer(&pipeline, "subnetwork", &dir);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let expected = params_checksum(&source.mask.as_ref().unwrap().applied(&source.params).unwrap());
    assert!(text(&o.stdout).contains(&format!("start_sha256 {expected}")));

    let dir = g.path().join("bias");
    assert_eq!(transfer(&pipeline, "signed_init_bias_const:0.1", &dir).status.code(), Some(0));
    let start = Checkpoint::load(&dir.join("start.ckpt")).unwrap();
    for i in start.params.layout().indices_with_role(Role::NormBias) {
        let v = start.params.values()[i];
        assert!(v == 0.1 || v == -0.1 || v == 0.0, "norm bias {v}");
        assert_eq!(v, 0.1 * f64::from(signs.signs()[i]));
    }

    let mut stripped = source.clone();
    stripped.signs = None;
    let bare = g.path().join("bare.ckpt");
    stripped.save(&bare).unwrap();
    let o = transfer(&bare, "signed_init", &g.path().join("never"));
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("signs"));
    assert_eq!(transfer(&bare, "mask_only", &g.path().join("mask_only")).status.code(), Some(0));
    assert_eq!(transfer(&pipeline, "sideways", &g.path().join("x")).status.code(), Some(2));
}

#[test]
fn stability_command_with_equal_seeds() {
    let (g, out) = minimal_run();
    let ckpt = out.join("arms/aws/trial0/solution.ckpt");
    let csv = g.path().join("s.csv");
    let mut args = vec!["stability", ckpt.to_str().unwrap(), "--u1", "3", "--u2", "3", "--epochs", "1"];
    args.extend(data_flags());
    args.extend(["--out", csv.to_str().unwrap()]);
    let o = ticketlab(&args, None);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("sup_barrier 0\n"));
}

#[test]
fn dataset_command_writes_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["dataset", "--source", "blobs", "--n", "100", "--test-fraction", "0.3"];
    args.extend(["--out", dir.path().to_str().unwrap()]);
    let o = ticketlab(&args, None);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let train = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let test = std::fs::read_to_string(dir.path().join("test.csv")).unwrap();
    assert!(train.starts_with("x0,x1,label\n"));
    assert_eq!(train.lines().count() - 1, 70);
    assert_eq!(test.lines().count() - 1, 30);
}

fn barrier_csv(arms: &[&str], trials: usize, grid: usize) -> String {
    let mut s = String::from("arm,trial,alpha,error,barrier\n");
    for arm in arms {
        for t in 0..trials {
            for i in 0..grid {
                let a = i as f64 / (grid - 1) as f64;
                s += &format!("{arm},{t},{a},{},{}\n", 0.1 + 0.01 * t as f64, a * (1.0 - a));
            }
        }
    }
    s
}

#[test]
fn plot_command() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str, body: &str| {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    };
    let plots = dir.path().join("plots");
    let run = |csv: &Path| ticketlab(&["plot", csv.to_str().unwrap(), "--out", plots.to_str().unwrap()], None);

    let one = p("one.csv", &barrier_csv(&["a~b"], 1, 21));
    assert_eq!(run(&one).status.code(), Some(0));
    let svg = std::fs::read_to_string(plots.join("one.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let line = svg.lines().find(|l| l.contains("<polyline")).unwrap();
    let points = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(points.split(' ').count(), 21);
    assert!(svg.contains(">alpha<") && svg.contains(">barrier<"));

    let two = p("two.csv", &barrier_csv(&["a~b", "c~d"], 3, 11));
    assert_eq!(run(&two).status.code(), Some(0));
    let svg = std::fs::read_to_string(plots.join("two.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("<polygon").count(), 2);

    let empty = p("empty.csv", "arm,trial,alpha,error,barrier\n");
    assert_eq!(run(&empty).status.code(), Some(1));

    let missing = p("missing.csv", "arm,trial,alpha,error\nx,0,0.5,0.1\n");
    let o = run(&missing);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("barrier"), "{}", text(&o.stderr));
}
