use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pram"))
        .args(args)
        .env_remove("PRAM_THREADS")
        .output()
        .expect("spawn pram")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["gen-data", "--out", out];
    args.extend_from_slice(extra);
    pram(&args)
}

/// Tiny dataset, fast to train on.
fn small_data(tmp: &TempDir) -> String {
    let d = tmp.path().join("data");
    ok(gen(&d, &["--ids", "4", "--per-id", "2", "--test-ids", "3"]));
    d.to_str().unwrap().to_string()
}

fn train_small(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--out",
        out.to_str().unwrap(),
        "--train.batch_size",
        "4",
        "--train.embed_dim",
        "64",
        "--train.head_dim",
        "32",
    ];
    args.extend_from_slice(extra);
    pram(&args)
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let flags = ["--ids", "20", "--per-id", "4", "--seed", "7", "--level", "mild", "--test-ids", "0"];
    let o = ok(gen(&a, &flags));
    assert!(stdout(&o).contains("train 20 ids / 160 samples"), "{}", stdout(&o));
    ok(gen(&b, &flags));
    let manifest = |d: &Path| fs::read(d.join("manifest.tsv")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    assert_eq!(manifest(&a).iter().filter(|&&c| c == b'\n').count(), 161);
    let first_pgm = |d: &Path| fs::read(d.join("train/0000/VIS_0.pgm")).unwrap();
    assert_eq!(first_pgm(&a), first_pgm(&b));
}

#[test]
fn severe_level_reports_empty_masks() {
    let tmp = TempDir::new().unwrap();
    let o = ok(gen(&tmp.path().join("s"), &["--ids", "20", "--level", "severe", "--test-ids", "0"]));
    let out = stdout(&o);
    let n: usize = out
        .rsplit("empty component masks ")
        .next()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| panic!("no empty-mask count in {out}"));
    assert!(n >= 1, "{out}");
}

#[test]
fn gen_data_rejects_bad_flags() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&gen(&tmp.path().join("x"), &["--level", "extreme"])), 2);
    assert_eq!(code(&gen(&tmp.path().join("x"), &["--ids", "many"])), 2);
    assert_eq!(code(&gen(&tmp.path().join("x"), &["--ids", "1"])), 2);
}

#[test]
fn gen_data_io_failure_is_exit_3() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    assert_eq!(code(&gen(&blocker.join("sub"), &["--ids", "2", "--per-id", "1"])), 3);
}

#[test]
fn default_train_echo_and_one_step_checkpoint_loads() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let out = tmp.path().join("run");
    let o = ok(pram(&[
        "train", "--data", &data, "--out", out.to_str().unwrap(), "--train.steps", "1",
    ]));
    let text = stdout(&o);
    assert!(text.contains("lr=0.001 wd=0.0005 batch=16 m=0.55 s=24"), "{text}");
    assert!(text.contains("final step 1"), "{text}");
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,l_softmax,l_cat,l_total,mean_lambda\n"));
    assert_eq!(loss.lines().count(), 2);
    assert!(fs::read(out.join("checkpoint.bin")).unwrap().starts_with(b"PRAMCK01"));
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("train.steps = 1"));

    let emb = tmp.path().join("emb.csv");
    ok(pram(&[
        "embed", "--checkpoint", out.join("checkpoint.bin").to_str().unwrap(), "--data", &data,
        "--out", emb.to_str().unwrap(),
    ]));
    let header = fs::read_to_string(&emb).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("sample_id,identity,domain,e0,"));
    assert!(header.ends_with(",e511"), "embedding dimension should be 512");
}

#[test]
fn baseline_ablation_flags_run() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let out = tmp.path().join("base");
    let o = ok(train_small(
        &data,
        &out,
        &["--train.steps", "2", "--train.cat_on", "off", "--train.pram_on", "false"],
    ));
    assert!(stdout(&o).contains("pram_on=false cat_on=off"), "{}", stdout(&o));
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    for row in loss.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[2], "0", "l_cat must be zero when the triplet term is off: {row}");
        assert_eq!(f[1], f[3]);
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "# experiment\ntrain.steps = 1\nloss.margin = 0.4\n").unwrap();
    let out = tmp.path().join("run");
    let o = ok(train_small(
        &data,
        &out,
        &["--config", cfg.to_str().unwrap(), "--loss.margin", "0.3"],
    ));
    assert!(stdout(&o).contains("m=0.3 "), "{}", stdout(&o));
    assert!(stdout(&o).contains("steps=1 "), "{}", stdout(&o));
}

#[test]
fn bad_config_is_exit_2() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("typo.cfg");
    fs::write(&cfg, "train.stpes = 3\n").unwrap();
    let o = train_small(&data, &out, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown config key `train.stpes`"), "{}", stderr(&o));
    assert_eq!(code(&train_small(&data, &out, &["--train.bogus", "1"])), 2);
    assert_eq!(code(&train_small(&data, &out, &["--train.lr", "fast"])), 2);
    assert_eq!(code(&train_small(&data, &out, &["--data.crop_size", "0"])), 2);
    assert_eq!(code(&train_small(&data, &out, &["--train.batch_size", "0"])), 2);
}

#[test]
fn missing_data_is_exit_3() {
    let tmp = TempDir::new().unwrap();
    let o = train_small(tmp.path().join("none").to_str().unwrap(), &tmp.path().join("o"), &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_aborts_with_exit_4() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let o = train_small(&data, &tmp.path().join("o"), &["--train.steps", "5", "--train.lr", "1e30"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let full = tmp.path().join("full");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    ok(train_small(&data, &full, &["--train.steps", "4"]));
    ok(train_small(&data, &half, &["--train.steps", "2"]));
    ok(pram(&[
        "train", "--data", &data, "--out", rest.to_str().unwrap(),
        "--resume", half.join("checkpoint.bin").to_str().unwrap(), "--train.steps", "4",
    ]));
    let rows = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("loss.csv")).unwrap().lines().skip(1).map(String::from).collect()
    };
    let mut stitched = rows(&half);
    stitched.extend(rows(&rest));
    assert_eq!(stitched, rows(&full));
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(rest.join("checkpoint.bin")).unwrap()
    );
    let o = pram(&[
        "train", "--data", &data, "--out", rest.to_str().unwrap(),
        "--resume", half.join("checkpoint.bin").to_str().unwrap(), "--loss.margin", "0.1",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn thread_setting_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let run = |threads: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_pram"))
            .args(["train", "--data", &data, "--out", out.to_str().unwrap()])
            .args(["--train.steps", "2", "--train.batch_size", "4", "--train.embed_dim", "64"])
            .env("PRAM_THREADS", threads)
            .output()
            .unwrap();
        (o, out)
    };
    let (a, da) = run("1", "t1");
    let (b, db) = run("4", "t4");
    assert!(a.status.success() && b.status.success());
    assert_eq!(
        fs::read(da.join("checkpoint.bin")).unwrap(),
        fs::read(db.join("checkpoint.bin")).unwrap()
    );
    let (bad, _) = run("zero", "tz");
    assert_eq!(code(&bad), 2);
}

fn write_embeddings(path: &Path, rows: &[(&str, usize, &str, [f32; 3])]) {
    let mut text = String::from("sample_id,identity,domain,e0,e1,e2\n");
    for (id, ident, dom, e) in rows {
        text.push_str(&format!("{id},{ident},{dom},{},{},{}\n", e[0], e[1], e[2]));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn eval_separable_embeddings_and_far_rows() {
    let tmp = TempDir::new().unwrap();
    let emb = tmp.path().join("e.csv");
    write_embeddings(
        &emb,
        &[
            ("v0", 0, "vis", [1.0, 0.0, 0.0]),
            ("v1", 1, "vis", [0.0, 1.0, 0.0]),
            ("v2", 2, "vis", [0.0, 0.0, 1.0]),
            ("n0", 0, "nir", [0.9, 0.1, 0.0]),
            ("n1", 1, "nir", [0.1, 0.9, 0.1]),
            ("n2", 2, "nir", [0.0, 0.2, 0.9]),
        ],
    );
    let out = tmp.path().join("m");
    let o = ok(pram(&[
        "eval", "--embeddings", emb.to_str().unwrap(), "--far", "0.5,0.2,0.1",
        "--out", out.to_str().unwrap(),
    ]));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "rank1,1.000000"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("vr@far=")).count(), 3);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let cmc = fs::read_to_string(out.join("cmc.csv")).unwrap();
    assert_eq!(cmc.lines().collect::<Vec<_>>(), ["rank,accuracy", "1,1.000000", "2,1.000000", "3,1.000000"]);
}

#[test]
fn eval_protocol_violation_is_exit_5() {
    let tmp = TempDir::new().unwrap();
    let emb = tmp.path().join("e.csv");
    write_embeddings(
        &emb,
        &[
            ("v0", 0, "vis", [1.0, 0.0, 0.0]),
            ("v1", 1, "vis", [0.0, 1.0, 0.0]),
            ("n0", 0, "nir", [0.9, 0.1, 0.0]),
            ("n7", 7, "nir", [0.0, 0.2, 0.9]),
        ],
    );
    let o = pram(&["eval", "--embeddings", emb.to_str().unwrap()]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn eval_metrics_match_library_on_same_embeddings() {
    use pram_core::eval::evaluate;
    use pram_core::trainer::{protocol_from_embeddings, read_embeddings};

    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp);
    let run = tmp.path().join("run");
    ok(train_small(&data, &run, &["--train.steps", "3"]));
    let ck = run.join("checkpoint.bin");
    let emb = tmp.path().join("emb.csv");
    ok(pram(&[
        "embed", "--checkpoint", ck.to_str().unwrap(), "--data", &data, "--split", "test",
        "--out", emb.to_str().unwrap(),
    ]));
    let from_ck = stdout(&ok(pram(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", &data])));
    let from_emb = stdout(&ok(pram(&["eval", "--embeddings", emb.to_str().unwrap()])));

    let records = read_embeddings(&emb).unwrap();
    let m = evaluate(&protocol_from_embeddings(&records).unwrap(), &[0.01, 0.001]).unwrap();
    let mut expected = format!("rank1,{:.6}\n", m.rank1);
    for (far, vr) in &m.vr {
        expected.push_str(&format!("vr@far={far},{vr:.6}\n"));
    }
    assert_eq!(from_emb, expected);
    assert_eq!(from_ck, expected);
}

#[test]
fn gradcheck_ops_passes_and_tiny_tolerance_fails() {
    let o = ok(pram(&["gradcheck", "--scope", "ops"]));
    let text = stdout(&o);
    assert!(text.contains("max_rel_error"));
    assert!(text.contains("passed"), "{text}");
    assert!(text.contains("< 1.0e-6"), "{text}");

    let o = pram(&["gradcheck", "--scope", "ops", "--tolerance", "1e-12"]);
    assert_eq!(code(&o), 6);
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("failed: max relative error"), "{}", stderr(&o));
    assert!(stderr(&o).contains("below float64 finite-difference noise"));

    assert_eq!(code(&pram(&["gradcheck", "--scope", "everything"])), 2);
}

#[test]
fn gradcheck_full_passes_at_default_tolerance() {
    let o = ok(pram(&["gradcheck", "--scope", "full"]));
    assert!(stdout(&o).contains("< 1.0e-4"), "{}", stdout(&o));
}

#[test]
fn help_lists_defaults() {
    let text = stdout(&ok(pram(&["train", "--help"])));
    for needle in [
        "--train.lr <VALUE>",
        "[default: 0.001]",
        "[default: 0.0005]",
        "[default: 16]",
        "[default: 0.55]",
        "[default: 24]",
        "--eval.far",
        "--resume",
    ] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let gen_help = stdout(&ok(pram(&["gen-data", "--help"])));
    assert!(gen_help.contains("[default: 20]") && gen_help.contains("[default: mild]"));
    let eval_help = stdout(&ok(pram(&["eval", "--help"])));
    assert!(eval_help.contains("[default: 0.01,0.001]"));
    for sub in ["embed", "gradcheck"] {
        ok(pram(&[sub, "--help"]));
    }
}
