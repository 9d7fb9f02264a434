//! Integration tests of the command-line surface: validation, error
//! records, and output formats.

use std::path::Path;
use std::process::{Command, Output};

fn langlens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langlens"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = langlens(dir, args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Expect failure with a machine-readable JSON error record on stderr.
fn run_err(dir: &Path, args: &[&str]) -> String {
    let out = langlens(dir, args);
    assert!(
        !out.status.success(),
        "command {args:?} unexpectedly succeeded"
    );
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let line = stderr.lines().last().unwrap_or("");
    let record: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {stderr}"));
    record["error"]
        .as_str()
        .expect("error record has an `error` field")
        .to_string()
}

fn make_small_setup(dir: &Path) {
    run_ok(
        dir,
        &[
            "make-corpus",
            "--out",
            "corpus",
            "--vocab-size",
            "64",
            "--shared-width",
            "4",
            "--docs",
            "10,6",
            "--doc-len",
            "12",
            "--seed",
            "5",
        ],
    );
    run_ok(
        dir,
        &[
            "train",
            "--corpus",
            "corpus/corpus.json",
            "--out",
            "model.bin",
            "--layers",
            "3",
            "--d-model",
            "16",
            "--n-heads",
            "2",
            "--d-head",
            "8",
            "--d-inter",
            "32",
            "--max-seq-len",
            "12",
            "--lr",
            "0.5",
            "--steps",
            "20",
            "--batch",
            "4",
            "--seed",
            "6",
        ],
    );
}

#[test]
fn deactivate_eval_without_flags_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    make_small_setup(dir.path());
    run_ok(
        dir.path(),
        &[
            "detect",
            "--model",
            "model.bin",
            "--corpus",
            "corpus/corpus.json",
            "--lang",
            "B",
            "--out",
            "setB.json",
        ],
    );
    let error = run_err(
        dir.path(),
        &[
            "deactivate-eval",
            "--model",
            "model.bin",
            "--set",
            "setB.json",
            "--corpus",
            "corpus/corpus.json",
            "--pivot",
            "A",
            "--n-under",
            "1",
            "--n-gen",
            "1",
            "--out",
            "eval.json",
        ],
    );
    assert!(error.contains("at least one of"), "{error}");
    assert!(
        !dir.path().join("eval.json").exists(),
        "no partial output on error"
    );
}

#[test]
fn missing_input_file_produces_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let error = run_err(
        dir.path(),
        &[
            "detect",
            "--model",
            "absent.bin",
            "--corpus",
            "nowhere.json",
            "--lang",
            "A",
            "--out",
            "set.json",
        ],
    );
    assert!(!error.is_empty());
}

#[test]
fn make_corpus_rejects_mismatched_doc_counts() {
    let dir = tempfile::tempdir().unwrap();
    let error = run_err(
        dir.path(),
        &[
            "make-corpus",
            "--out",
            "corpus",
            "--langs",
            "A,B",
            "--docs",
            "10",
            "--seed",
            "1",
        ],
    );
    assert!(error.contains("counts"), "{error}");
}

#[test]
fn overlap_matrix_has_unit_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    make_small_setup(dir.path());
    for lang in ["A", "B"] {
        run_ok(
            dir.path(),
            &[
                "detect",
                "--model",
                "model.bin",
                "--corpus",
                "corpus/corpus.json",
                "--lang",
                lang,
                "--out",
                &format!("set{lang}.json"),
            ],
        );
    }
    run_ok(
        dir.path(),
        &[
            "overlap",
            "--sets",
            "setA.json",
            "setB.json",
            "--out",
            "overlap.csv",
        ],
    );
    let csv = std::fs::read_to_string(dir.path().join("overlap.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# manifest:"));
    assert_eq!(lines.next().unwrap(), "x,A,B");
    let row_a: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row_b: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row_a[1], "1");
    assert_eq!(row_b[2], "1");
}

#[test]
fn checkpoint_note_references_the_run() {
    let dir = tempfile::tempdir().unwrap();
    make_small_setup(dir.path());
    let bytes = std::fs::read(dir.path().join("model.bin")).unwrap();
    let (_, note) = langlens::model::weights_from_bytes(&bytes).unwrap();
    let note = note.expect("training embeds a manifest note");
    assert!(note.contains("\"command\":\"train\""), "{note}");
}

#[test]
fn importance_embeds_manifest_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    make_small_setup(dir.path());
    run_ok(
        dir.path(),
        &[
            "importance",
            "--model",
            "model.bin",
            "--doc-file",
            "corpus/validation_A.txt",
            "--out",
            "imp.json",
        ],
    );
    let bytes = std::fs::read(dir.path().join("imp.json")).unwrap();
    let value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(value["manifest"]["command"], "importance");
    // The extra manifest field must not break the parser.
    let map = langlens::importance::importance_from_bytes(&bytes).unwrap();
    assert_eq!(map.layers.len(), 3);
}

#[test]
fn probe_csv_fractions_sum_to_one_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    make_small_setup(dir.path());
    run_ok(
        dir.path(),
        &[
            "probe",
            "--model",
            "model.bin",
            "--corpus",
            "corpus/corpus.json",
            "--doc-file",
            "corpus/validation_B.txt",
            "--out",
            "probe.csv",
        ],
    );
    let csv = std::fs::read_to_string(dir.path().join("probe.csv")).unwrap();
    let mut sums: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    for line in csv.lines().skip(2) {
        let fields: Vec<&str> = line.split(',').collect();
        *sums.entry(fields[0].parse().unwrap()).or_default() += fields[2].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 4, "3 layers + embedding state");
    for (layer, sum) in sums {
        assert!((sum - 1.0).abs() <= 1e-12, "layer {layer} sums to {sum}");
    }
}

#[test]
fn report_merges_evaluation_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    make_small_setup(dir.path());
    run_ok(
        dir.path(),
        &[
            "detect",
            "--model",
            "model.bin",
            "--corpus",
            "corpus/corpus.json",
            "--lang",
            "B",
            "--out",
            "setB.json",
        ],
    );
    for (name, source) in [("e1.json", "lang-spec"), ("e2.json", "random")] {
        run_ok(
            dir.path(),
            &[
                "deactivate-eval",
                "--model",
                "model.bin",
                "--set",
                "setB.json",
                "--corpus",
                "corpus/corpus.json",
                "--pivot",
                "A",
                "--n-under",
                "1",
                "--n-gen",
                "1",
                "--under",
                "--source",
                source,
                "--seed",
                "3",
                "--out",
                name,
            ],
        );
    }
    run_ok(
        dir.path(),
        &["report", "e1.json", "e2.json", "--out", "merged.csv"],
    );
    let csv = std::fs::read_to_string(dir.path().join("merged.csv")).unwrap();
    let data_rows = csv.lines().skip(2).count();
    assert_eq!(data_rows, 4, "two configs x two languages");
    assert!(csv.contains("source=lang-spec"));
    assert!(csv.contains("source=random(seed=3)"));
}
