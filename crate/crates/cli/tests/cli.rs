use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model.width_v=16",
    "model.width_t=16",
    "model.heads=2",
    "model.latent_dim=8",
    "model.image_layers=1",
    "model.text_layers=1",
    "train.batch_size=4",
    "train.steps=3",
    "loss.group_size=8",
    "loss.group_stride=8",
];

fn cada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cada")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

fn gen(dir: &Path, ids: &str) -> Output {
    cada(&["gen-data", "--ids", ids, "--images-per-id", "2", "--captions-per-image", "2", "--out", dir.to_str().unwrap()])
}

fn tiny_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--data", data, "--out", out];
    for o in TINY {
        v.extend(["--override", o]);
    }
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = stdout(&ok(gen(a.path(), "10")));
    let sb = stdout(&ok(gen(b.path(), "10")));
    assert!(sa.contains("identities 10 (train 8, test 2)"), "{sa}");
    assert!(sa.contains("capacity"), "{sa}");
    let sum = |s: &str| s.lines().find(|l| l.starts_with("manifest sha256")).unwrap().to_string();
    assert_eq!(sum(&sa), sum(&sb));
}

#[test]
fn one_identity_is_a_validation_failure() {
    let d = tempfile::tempdir().unwrap();
    let o = gen(d.path(), "1");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_override_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(gen(d.path(), "6"));
    let data = d.path().to_str().unwrap();
    let out = d.path().join("run");
    let o = cada(&["train", "--data", data, "--out", out.to_str().unwrap(), "--override", "model.depth=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.depth"));
}

#[test]
fn train_then_eval_both_protocols() {
    let d = tempfile::tempdir().unwrap();
    ok(gen(d.path(), "6"));
    let data = d.path().to_str().unwrap();
    let run = d.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(cada(&[&["train"][..], &tiny_args(data, run_s, &["--no-ara", "--seed", "3"])].concat()));
    for f in ["config.txt", "run.json", "train_log.csv", "final.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let cfg = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(cfg.contains("loss.ara = false") && cfg.contains("train.seed = 3"), "{cfg}");
    let meta = std::fs::read_to_string(run.join("run.json")).unwrap();
    assert!(meta.contains("dataset_manifest_sha256"), "{meta}");

    let ck = run.join("final.ckpt");
    let ck = ck.to_str().unwrap();
    let rep = d.path().join("reports");
    let rep_s = rep.to_str().unwrap();
    ok(cada(&["eval", "--data", data, "--checkpoint", ck, "--protocol", "global", "--out", rep_s]));
    ok(cada(&["eval", "--data", data, "--checkpoint", ck, "--protocol", "local", "--eta", "0", "--out", rep_s]));
    let o = ok(cada(&["eval", "--data", data, "--checkpoint", ck, "--protocol", "local", "--eta", "2", "--out", rep_s]));
    assert!(stdout(&o).contains("decoder_calls=8"), "{}", stdout(&o));
    let read = |n: &str| std::fs::read_to_string(rep.join(n)).unwrap();
    let (g, l0) = (read("eval_global_eta0.csv"), read("eval_local_eta0.csv"));
    let body = |s: &str| s.lines().filter(|l| !l.starts_with("protocol,")).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&g), body(&l0));
}

#[test]
fn eta_sweep_writes_csv_and_plot() {
    let d = tempfile::tempdir().unwrap();
    ok(gen(d.path(), "6"));
    let data = d.path().to_str().unwrap();
    let out = d.path().join("sweep");
    let out_s = out.to_str().unwrap();
    ok(cada(&[&["sweep", "eta"][..], &tiny_args(data, out_s, &["--values", "0,1,2,4"])].concat()));
    let csv = std::fs::read_to_string(out.join("sweep_eta.csv")).unwrap();
    let calls: Vec<usize> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(calls.len(), 4);
    assert!(calls.windows(2).all(|w| w[0] <= w[1]), "{calls:?}");
    assert!(std::fs::read_to_string(out.join("sweep_eta.svg")).unwrap().starts_with("<svg"));
}
