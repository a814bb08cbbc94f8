use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lpanet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpanet"))
        .args(args)
        .current_dir(dir)
        .env_remove("LPANET_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

fn write_config(dir: &Path, name: &str, extra: &str) {
    let text = format!(
        "[train]\nepochs = 2\nbatch_size = 8\nseed = 3\n\n[paths]\ntrain = train/manifest.csv\nvalid = valid/manifest.csv\ncheckpoint = {name}.ckpt\nlog = {name}.log\n{extra}"
    );
    fs::write(dir.join(format!("{name}.ini")), text).unwrap();
}

/// Small train and validation sets plus one config, shared by several tests.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&lpanet(
        &["gen-synth", "--out", "train", "--n", "30", "--seed", "1"],
        dir.path(),
    ));
    ok(&lpanet(
        &["gen-synth", "--out", "valid", "--n", "20", "--seed", "2"],
        dir.path(),
    ));
    write_config(dir.path(), "run", "");
    dir
}

#[test]
fn gen_synth_is_deterministic_with_exact_positive_count() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out| {
        [
            "gen-synth",
            "--out",
            out,
            "--n",
            "200",
            "--seed",
            "9",
            "--positive-rate",
            "0.05",
        ]
    };
    ok(&lpanet(&args("a"), dir.path()));
    ok(&lpanet(&args("b"), dir.path()));
    let a = tree(&dir.path().join("a"));
    assert_eq!(a, tree(&dir.path().join("b")));
    assert_eq!(a.len(), 202);

    let manifest = String::from_utf8(a["manifest.csv"].clone()).unwrap();
    let positives: Vec<&str> = manifest
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("1"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(positives.len(), 10);

    // scan the written files: every positive has patterns, covering < 10% of its frames
    let patterns = String::from_utf8(a["patterns.csv"].clone()).unwrap();
    let mut by_id: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for line in patterns.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        by_id
            .entry(f[0])
            .or_default()
            .push((f[1].parse().unwrap(), f[2].parse().unwrap()));
    }
    assert_eq!(by_id.keys().copied().collect::<Vec<_>>(), positives);
    for (id, spans) in by_id {
        let text = String::from_utf8(a[&format!("signals/{id}.txt")].clone()).unwrap();
        let frames = text.lines().nth(1).unwrap().split_whitespace().count();
        let mut covered = vec![false; frames];
        for (start, width) in spans {
            assert!(start + width <= frames);
            covered[start..start + width].iter_mut().for_each(|c| *c = true);
        }
        let n = covered.iter().filter(|c| **c).count();
        assert!(10 * n < frames, "{id}: {n} of {frames} frames");
    }
}

#[test]
fn train_is_reproducible_and_eval_matches_log() {
    let dir = workspace();
    let d = dir.path();
    write_config(d, "again", "");
    ok(&lpanet(&["train", "--config", "run.ini"], d));
    ok(&lpanet(&["train", "--config", "again.ini"], d));
    assert_eq!(
        fs::read(d.join("run.ckpt")).unwrap(),
        fs::read(d.join("again.ckpt")).unwrap()
    );
    let log = fs::read_to_string(d.join("run.log")).unwrap();
    assert_eq!(log, fs::read_to_string(d.join("again.log")).unwrap());

    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "# crops_per_sample=8 params=1856");
    let best: usize = log
        .lines()
        .find_map(|l| l.strip_prefix("# best_epoch="))
        .unwrap()
        .parse()
        .unwrap();
    let logged = log
        .lines()
        .find(|l| l.split('\t').next() == Some(&best.to_string()))
        .unwrap();
    let logged_metrics: Vec<&str> = logged.split('\t').skip(2).collect();

    let csv = ok(&lpanet(
        &[
            "eval",
            "--config",
            "run.ini",
            "--manifest",
            "valid/manifest.csv",
            "--csv",
        ],
        d,
    ));
    let row = csv.lines().nth(1).unwrap();
    assert_eq!(row.split(',').collect::<Vec<_>>(), logged_metrics);

    let table = ok(&lpanet(
        &["eval", "--config", "run.ini", "--manifest", "valid/manifest.csv"],
        d,
    ));
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Se", "Sp", "Acc", "F_pos", "F_neg", "F_avg"]);

    let pred = ok(&lpanet(
        &["predict", "--config", "run.ini", "--manifest", "valid/manifest.csv"],
        d,
    ));
    let rows: Vec<&str> = pred.lines().collect();
    assert_eq!(rows[0], "id\tp0\tp1");
    assert_eq!(rows.len(), 21);
    for r in &rows[1..] {
        let p: Vec<f64> = r.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((p[0] + p[1] - 1.0).abs() < 2e-6, "{r}");
    }
}

#[test]
fn seed_env_overrides_config() {
    let dir = workspace();
    let d = dir.path();
    write_config(d, "env", "");
    ok(&lpanet(&["train", "--config", "run.ini"], d));
    let out = Command::new(env!("CARGO_BIN_EXE_lpanet"))
        .args(["train", "--config", "env.ini"])
        .current_dir(d)
        .env("LPANET_SEED", "4")
        .output()
        .unwrap();
    ok(&out);
    assert_ne!(
        fs::read(d.join("run.ckpt")).unwrap(),
        fs::read(d.join("env.ckpt")).unwrap()
    );
}

#[test]
fn exit_codes_by_error_class() {
    let dir = workspace();
    let d = dir.path();

    fs::write(d.join("bad.ini"), "[train]\nepochs = 1\nlearn_rate = 0.1\n").unwrap();
    let out = lpanet(&["train", "--config", "bad.ini"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learn_rate"), "{}", stderr(&out));

    let out = lpanet(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(1));

    fs::write(d.join("valid/signals/s00003.txt"), "# rate=150\n0.1 0.2 oops\n").unwrap();
    let out = lpanet(&["train", "--config", "run.ini"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("s00003.txt:2"), "{}", stderr(&out));

    fs::write(d.join("run.ckpt"), b"LPAN\x01\x00\x00\x00\x10").unwrap();
    let out = lpanet(&["eval", "--config", "run.ini", "--manifest", "train/manifest.csv"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&lpanet(&["gradcheck"], dir.path()));
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 72);
    assert!(!out.contains("FAIL"));
}

#[test]
fn agg_bench_rows_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "agg-bench",
        "--n-train",
        "20",
        "--n-valid",
        "10",
        "--n-test",
        "10",
        "--epochs",
        "1",
        "--csv",
    ];
    let run = |aggs: &str| {
        let mut args = base.to_vec();
        args.extend(["--aggregators", aggs]);
        ok(&lpanet(&args, dir.path()))
    };
    let both = run("noisy_or,gen_mean");
    let one = run("gen_mean");
    let row = |text: &str| text.lines().find(|l| l.starts_with("gen_mean")).unwrap().to_string();
    assert_eq!(row(&both), row(&one));
    assert_eq!(both.lines().count(), 3);
}
