use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emorag::embedding_store::{load_db, IntensityLevel};
use emorag::flow_matching::{encode_checkpoint, load_checkpoint, FlowTask, SyntheticMelTask, VectorFieldModel};

fn emorag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emorag"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = emorag(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn gen_data_sizes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--emotions", "4", "--per-emotion", "750", "--dim", "64", "--seed", "7"];
    let out = ok(dir.path(), &[&args[..], &["--out", "a.emdb"]].concat());
    assert!(stdout(&out).contains("3000 records"));
    ok(dir.path(), &[&args[..], &["--out", "b.emdb"]].concat());
    assert_eq!(load_db(&dir.path().join("a.emdb")).unwrap().len(), 3000);
    assert_eq!(
        std::fs::read(dir.path().join("a.emdb")).unwrap(),
        std::fs::read(dir.path().join("b.emdb")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&emorag(dir.path(), &["gen-data", "--emotions", "4"])), 2);
    assert_eq!(code(&emorag(dir.path(), &["bench", "--queries", "0"])), 2);
    assert_eq!(code(&emorag(dir.path(), &["gen-data", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&emorag(dir.path(), &["gen-data", "--out", "x", "--mix", "0.5,0.6,0.1"])), 2);
    assert_eq!(code(&emorag(dir.path(), &["--help"])), 0);
}

fn small_db(dir: &Path, name: &str, mix: &str) {
    ok(
        dir,
        &["gen-data", "--emotions", "4", "--per-emotion", "30", "--dim", "8", "--mix", mix, "--out", name],
    );
}

#[test]
fn build_index_default_k_and_skipped_level() {
    let dir = tempfile::tempdir().unwrap();
    small_db(dir.path(), "db.emdb", "0.5,0.5,0");
    let out = ok(dir.path(), &["build-index", "--db", "db.emdb", "--out", "idx"]);
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("all: k=4 ")), "{text}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("no strong records"));
    assert!(dir.path().join("idx.all.emix").exists());
    assert!(dir.path().join("idx.weak.emix").exists());
    assert!(!dir.path().join("idx.strong.emix").exists());

    let out = ok(dir.path(), &["build-index", "--db", "db.emdb", "--k", "1", "--out", "one"]);
    assert!(stdout(&out).lines().any(|l| l.starts_with("all: k=1 ")));

    let out = emorag(dir.path(), &["build-index", "--db", "db.emdb", "--k", "500", "--out", "big"]);
    assert_eq!(code(&out), 6);
    assert!(String::from_utf8_lossy(&out.stderr).contains("k=500"));
}

fn write_query(dir: &Path, name: &str, values: &[f32]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(values).unwrap()).unwrap();
    path
}

fn retrieved(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn retrieve_exact_record_and_gating() {
    let dir = tempfile::tempdir().unwrap();
    small_db(dir.path(), "db.emdb", "0.5,0.5,0");
    let db = load_db(&dir.path().join("db.emdb")).unwrap();
    let target = &db.records()[37];
    write_query(dir.path(), "q.json", target.embedding.values());

    let out = ok(dir.path(), &["retrieve", "--db", "db.emdb", "--query", "q.json", "--method", "embedding"]);
    let r = retrieved(&out);
    assert_eq!(r["record_id"], target.id.as_str());
    assert!((r["similarity"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let out = emorag(dir.path(), &["retrieve", "--db", "db.emdb", "--query", "q.json", "--intensity", "strong"]);
    assert_eq!(code(&out), 3);

    ok(dir.path(), &["build-index", "--db", "db.emdb", "--k", "1", "--out", "one"]);
    for (i, record) in db.records().iter().enumerate().step_by(7) {
        let q = write_query(dir.path(), &format!("q{i}.json"), record.embedding.values());
        let q = q.to_str().unwrap();
        let e = retrieved(&ok(dir.path(), &["retrieve", "--db", "db.emdb", "--query", q]));
        let c = retrieved(&ok(
            dir.path(),
            &["retrieve", "--db", "db.emdb", "--index", "one", "--query", q, "--method", "clustering"],
        ));
        assert_eq!(e["record_id"], c["record_id"]);
        assert_eq!(c["method"], "clustering");
    }
}

#[test]
fn retrieve_needs_an_index_for_clustering() {
    let dir = tempfile::tempdir().unwrap();
    small_db(dir.path(), "db.emdb", "0.5,0.5,0");
    write_query(dir.path(), "q.json", &[1.0; 8]);
    let out = emorag(dir.path(), &["retrieve", "--db", "db.emdb", "--query", "q.json", "--method", "clustering"]);
    assert_eq!(code(&out), 6);
    let out = emorag(dir.path(), &["retrieve", "--db", "missing.emdb", "--query", "q.json"]);
    assert_eq!(code(&out), 1);
    std::fs::write(dir.path().join("junk.emdb"), b"EMDBjunk").unwrap();
    assert_eq!(code(&emorag(dir.path(), &["retrieve", "--db", "junk.emdb", "--query", "q.json"])), 5);
}

#[test]
fn bench_report_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bench", "--sizes", "160,320", "--methods", "embedding,clustering", "--queries", "100", "--dim", "16",
    ];
    let a = stdout(&ok(dir.path(), &args));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "method,db_size,accuracy,mean_latency_ns,p95_latency_ns,queries");
    let b = stdout(&ok(dir.path(), &args));
    let acc = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(acc(&a), acc(&b));

    ok(dir.path(), &[&args[..], &["--format", "json", "--out", "r.json"]].concat());
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    let out = emorag(dir.path(), &["bench", "--sizes", "100", "--queries", "5"]);
    assert_eq!(code(&out), 2, "100 is not a multiple of 8 emotions");
}

#[test]
fn bench_table_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &["bench", "--sizes", "3000,8000", "--methods", "embedding,clustering", "--queries", "1000"],
    );
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, prefix) in rows.iter().zip(["embedding,3000,", "embedding,8000,", "clustering,3000,", "clustering,8000,"]) {
        assert!(row.starts_with(prefix), "{row}");
        assert!(row.ends_with(",1000"));
    }
}

#[test]
fn train_fm_default_run_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train-fm", "--out", "fm.ckpt", "--loss-log", "loss.csv"]);
    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 2000);
    let (first, last) = (losses[0], losses[1999]);
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
    let model = load_checkpoint(&dir.path().join("fm.ckpt")).unwrap();
    assert_eq!(model.layer_sizes(), &[80 + 1 + 16 + 8, 512, 80]);
}

#[test]
fn train_fm_zero_steps_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["train-fm", "--steps", "0", "--hidden", "32,16", "--seed", "5", "--out", "fm.ckpt", "--loss-log", "l.csv"],
    );
    let task = SyntheticMelTask::new(80, 16, 8, 4, 5).unwrap();
    let init = VectorFieldModel::new(task.dims(), &[32, 16], 5).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("fm.ckpt")).unwrap(),
        encode_checkpoint(&init).unwrap()
    );
    let log = std::fs::read_to_string(dir.path().join("l.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

/// Database with token files, index, reference query and a briefly
/// trained checkpoint.
fn synth_fixture(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data", "--emotions", "3", "--per-emotion", "20", "--dim", "16", "--tokens-dir", "tokens",
            "--token-dim", "8", "--query-out", "ref.json", "--out", "db.emdb",
        ],
    );
    ok(dir, &["build-index", "--db", "db.emdb", "--out", "idx"]);
    ok(
        dir,
        &["train-fm", "--steps", "30", "--hidden", "32", "--mel-dim", "20", "--token-dim", "8", "--out", "fm.ckpt"],
    );
}

fn synth_args<'a>(out: &'a str, report: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "synth", "--db", "db.emdb", "--index", "idx", "--tokens", "tokens/tokens.json", "--checkpoint", "fm.ckpt",
        "--reference", "ref.json", "--text", "sawasdee krap", "--seed", "7", "--ode-steps", "8", "--out", out,
        "--report", report,
    ];
    args.extend_from_slice(extra);
    args
}

fn report(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_and_gated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_fixture(d);
    ok(d, &synth_args("a.mel", "a.json", &[]));
    ok(d, &synth_args("b.mel", "b.json", &[]));
    assert_eq!(std::fs::read(d.join("a.mel")).unwrap(), std::fs::read(d.join("b.mel")).unwrap());
    let (ra, rb) = (report(d, "a.json"), report(d, "b.json"));
    assert_eq!(ra["retrieved_id"], rb["retrieved_id"]);
    assert_eq!(ra["seed"], 7);
    // 13 characters -> 52 generated frames after the prompt, upsampled 1.6x
    let mel = emorag::flow_matching::load_frames(&d.join("a.mel")).unwrap();
    assert_eq!(mel.dim(), 20);
    assert_eq!(mel.frame_rate_hz(), 80.0);

    ok(d, &synth_args("w.mel", "w.json", &["--intensity", "weak"]));
    let rw = report(d, "w.json");
    assert_eq!(rw["intensity"], "weak");
    assert_eq!(rw["retrieved_intensity"], "weak");
    let db = load_db(&d.join("db.emdb")).unwrap();
    let id = rw["retrieved_id"].as_str().unwrap();
    assert_eq!(db.get(id).unwrap().intensity, IntensityLevel::Weak);
}

#[test]
fn synth_errors_are_stage_attributed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_fixture(d);
    let mut args = synth_args("a.mel", "a.json", &[]);
    let pos = args.iter().position(|a| *a == "fm.ckpt").unwrap();
    args[pos] = "missing.ckpt";
    let out = emorag(d, &args);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("flow_matching stage failed"));
    assert!(!d.join("a.mel").exists());
}
