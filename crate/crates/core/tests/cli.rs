use std::fs;
use std::path::Path;

use bld::model::StudentModel;
use bld::pipeline::cli::run_cli_captured;

fn run(args: &[&str]) -> (i32, String) {
    run_cli_captured(std::iter::once("bld").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exact_byteprobs_on_the_toy_vocabulary() {
    let (code, out) = run(&["byteprobs", "exact", "--vocab", "toy", "--input", "ab"]);
    assert_eq!(code, 0, "{out}");
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].contains("'a'=0.666666666667"), "{out}");
    assert!(lines[1].starts_with("1\t\"a\""), "{out}");
    assert!(lines[1].contains("'b'=0.666666666667"), "{out}");
}

#[test]
fn beam_byteprobs_agree_with_exact_on_the_toy_vocabulary() {
    let (_, exact) = run(&["byteprobs", "exact", "--vocab", "toy", "--input", "abab"]);
    let (code, beam) = run(&[
        "byteprobs",
        "beam",
        "--vocab",
        "toy",
        "--input",
        "abab",
        "--k",
        "0",
        "--eps",
        "0",
    ]);
    assert_eq!(code, 0, "{beam}");
    let rows = |s: &str| {
        s.lines()
            .filter(|l| l.contains('\t'))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(&exact), rows(&beam));
}

#[test]
fn sweep_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(&[
        "--workers",
        "2",
        "sweep",
        "--samples",
        "12",
        "--k",
        "2,10",
        "--eps",
        "1e-1,1e-2",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, 0, "{out}");
    let records = fs::read_to_string(dir.path().join("sweep.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4);
    assert!(dir.path().join("sweep.txt").exists());
    let svgs = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "svg")
        })
        .count();
    assert!(svgs >= 2);
}

#[test]
fn zero_step_distillation_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("student.bldm");
    let (code, log) = run(&[
        "distill",
        "--samples",
        "8",
        "--steps",
        "0",
        "--out",
        path(&out),
    ]);
    assert_eq!(code, 0, "{log}");
    let saved = StudentModel::load(&out).unwrap();
    let fresh = StudentModel::new(*saved.config()).unwrap();
    assert_eq!(saved.to_checkpoint_bytes(), fresh.to_checkpoint_bytes());
}

#[test]
fn precompute_then_distill_from_shards() {
    let dir = tempfile::tempdir().unwrap();
    let shards = dir.path().join("shards");
    let (code, log) = run(&[
        "precompute",
        "--samples",
        "12",
        "--shards",
        "3",
        "--k",
        "4",
        "--eps",
        "1e-2",
        "--out",
        path(&shards),
    ]);
    assert_eq!(code, 0, "{log}");
    assert!(shards.join("shard-00002.bldp").exists());
    let model = dir.path().join("m.bldm");
    let (code, log) = run(&[
        "distill",
        "--samples",
        "12",
        "--shards",
        path(&shards),
        "--steps",
        "3",
        "--lr",
        "1e-3",
        "--warmup-steps",
        "1",
        "--out",
        path(&model),
    ]);
    assert_eq!(code, 0, "{log}");
    let trace = fs::read_to_string(model.with_extension("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3);
}

#[test]
fn tokenize_prints_pieces() {
    let (code, out) = run(&["tokenize", "--vocab", "toy", "--input", "abba"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("ab"), "{out}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["sweep", "--k", "x"]).0, 2);
    assert_eq!(run(&["no-such-command"]).0, 2);
}

#[test]
fn stage_failures_exit_with_one() {
    let (code, out) = run(&[
        "byteprobs",
        "exact",
        "--vocab",
        "/does/not/exist",
        "--input",
        "a",
    ]);
    assert_eq!(code, 1);
    assert!(out.contains("failed"), "{out}");
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&[
        "precompute",
        "--samples",
        "2",
        "--shards",
        "5",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, 1);
}
