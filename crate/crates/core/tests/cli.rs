mod support;

use std::fs;
use std::path::Path;

use qe_core::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use qe_core::corpus::{read_predictions, write_dataset, write_predictions, PredictionSet, Split};
use qe_core::metrics::CorrelationReport;

fn qe(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("qe").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            &support::corrupted_copies(32, 21, "tr", Split::Train),
            dir.path().join("train.tsv"),
        )
        .unwrap();
        write_dataset(
            &support::corrupted_copies(16, 22, "dv", Split::Dev),
            dir.path().join("dev.tsv"),
        )
        .unwrap();
        write_dataset(
            &support::corrupted_copies(24, 23, "te", Split::Test),
            dir.path().join("test.tsv"),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, seed: &str) {
        let (code, _, err) = qe(&[
            "train",
            "--train",
            p(&self.path("train.tsv")),
            "--dev",
            p(&self.path("dev.tsv")),
            "--out",
            p(&self.path(out)),
            "--preset",
            "tiny",
            "--lr",
            "1e-3",
            "--epochs",
            "4",
            "--seed",
            seed,
            "--log",
            p(&self.path(&format!("{out}.log"))),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
    }
}

#[test]
fn train_predict_evaluate_round_trip() {
    let ws = Workspace::new();
    ws.train("m.qeck", "3");
    let (code, _, err) = qe(&[
        "predict",
        "--model",
        p(&ws.path("m.qeck")),
        "--in",
        p(&ws.path("test.tsv")),
        "--out",
        p(&ws.path("preds.tsv")),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(read_predictions(ws.path("preds.tsv")).unwrap().len(), 24);

    let (code, out, err) = qe(&[
        "evaluate",
        "--preds",
        p(&ws.path("preds.tsv")),
        "--gold",
        p(&ws.path("test.tsv")),
        "--report",
        p(&ws.path("report.json")),
        "--method",
        "tiny",
        "--pair",
        "src-tgt",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("tiny\tsrc-tgt\t"));
    let report: CorrelationReport =
        serde_json::from_str(&fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(report.n, 24);
    assert!(report.spearman_rho.abs() <= 1.0 && report.pearson_r.abs() <= 1.0);

    let (code, out, err) = qe(&["report", "--inputs", p(&ws.path("report.json"))]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("tiny") && out.contains(&format!("*{:.3}", report.spearman_rho)));
}

#[test]
fn pipeline_is_byte_deterministic() {
    let ws = Workspace::new();
    ws.train("a.qeck", "9");
    ws.train("b.qeck", "9");
    assert_eq!(
        fs::read(ws.path("a.qeck")).unwrap(),
        fs::read(ws.path("b.qeck")).unwrap()
    );
    assert_eq!(
        fs::read(ws.path("a.qeck.log")).unwrap(),
        fs::read(ws.path("b.qeck.log")).unwrap()
    );
    for m in ["a", "b"] {
        let (code, _, err) = qe(&[
            "predict",
            "--model",
            p(&ws.path(&format!("{m}.qeck"))),
            "--in",
            p(&ws.path("test.tsv")),
            "--out",
            p(&ws.path(&format!("{m}.preds"))),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
    }
    assert_eq!(
        fs::read(ws.path("a.preds")).unwrap(),
        fs::read(ws.path("b.preds")).unwrap()
    );
}

#[test]
fn evaluate_names_missing_gold_id() {
    let ws = Workspace::new();
    let mut preds = PredictionSet::new((0..24).map(|i| (format!("te{i}"), i as f64)).collect()).unwrap();
    preds.entries.retain(|(id, _)| id != "te17");
    write_predictions(&preds, ws.path("short.tsv")).unwrap();
    let (code, _, err) = qe(&[
        "evaluate",
        "--preds",
        p(&ws.path("short.tsv")),
        "--gold",
        p(&ws.path("test.tsv")),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(
        err.starts_with("error[alignment]:") && err.contains("te17"),
        "{err}"
    );
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn single_file_ensemble_is_identity() {
    let ws = Workspace::new();
    let preds =
        PredictionSet::new(vec![("x".into(), 0.1), ("y".into(), -2.5e-7), ("z".into(), 3.0)]).unwrap();
    write_predictions(&preds, ws.path("one.tsv")).unwrap();
    let (code, _, err) = qe(&[
        "ensemble",
        "--preds",
        p(&ws.path("one.tsv")),
        "--out",
        p(&ws.path("ens.tsv")),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(
        fs::read(ws.path("one.tsv")).unwrap(),
        fs::read(ws.path("ens.tsv")).unwrap()
    );
}

#[test]
fn ensemble_of_mismatched_files_fails() {
    let ws = Workspace::new();
    write_predictions(
        &PredictionSet::new(vec![("x".into(), 0.1)]).unwrap(),
        ws.path("a.tsv"),
    )
    .unwrap();
    write_predictions(
        &PredictionSet::new(vec![("y".into(), 0.1)]).unwrap(),
        ws.path("b.tsv"),
    )
    .unwrap();
    let (code, _, err) = qe(&[
        "ensemble",
        "--preds",
        p(&ws.path("a.tsv")),
        p(&ws.path("b.tsv")),
        "--out",
        p(&ws.path("o.tsv")),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(
        err.starts_with("error[alignment]:") && err.contains("x, y"),
        "{err}"
    );
}

#[test]
fn footprint_of_checkpoint_and_manifest() {
    let ws = Workspace::new();
    ws.train("m.qeck", "1");
    let size = fs::metadata(ws.path("m.qeck")).unwrap().len();
    let (code, out, _) = qe(&[
        "footprint",
        "--model",
        p(&ws.path("m.qeck")),
        "--out",
        p(&ws.path("fp.json")),
        "--name",
        "tiny",
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.trim(), size.to_string());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("fp.json")).unwrap()).unwrap();
    assert_eq!(json, serde_json::json!({"name": "tiny", "bytes": size}));

    fs::write(ws.path("ens.txt"), "m.qeck\n# comment\n\nm.qeck\nm.qeck\n").unwrap();
    let (code, out, _) = qe(&["footprint", "--model", p(&ws.path("ens.txt"))]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.trim(), (3 * size).to_string());

    fs::write(ws.path("bad.txt"), "absent.qeck\n").unwrap();
    let (code, _, err) = qe(&["footprint", "--model", p(&ws.path("bad.txt"))]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.starts_with("error[io]:"), "{err}");
}

#[test]
fn failures_use_the_error_prefix_and_exit_codes() {
    let ws = Workspace::new();
    let (code, _, err) = qe(&[
        "train",
        "--train",
        "/nonexistent.tsv",
        "--dev",
        p(&ws.path("dev.tsv")),
        "--out",
        p(&ws.path("x.qeck")),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.starts_with("error[io]:"));

    let (code, _, err) = qe(&[
        "train",
        "--train",
        p(&ws.path("train.tsv")),
        "--dev",
        p(&ws.path("dev.tsv")),
        "--out",
        p(&ws.path("x.qeck")),
        "--n-heads",
        "3",
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.starts_with("error[config]:"), "{err}");

    fs::write(ws.path("garbage.qeck"), b"00000004nope").unwrap();
    let (code, _, err) = qe(&[
        "predict",
        "--model",
        p(&ws.path("garbage.qeck")),
        "--in",
        p(&ws.path("test.tsv")),
        "--out",
        p(&ws.path("o.tsv")),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.starts_with("error[manifest]:"), "{err}");

    let (code, _, err) = qe(&["evaluate", "--preds", p(&ws.path("test.tsv"))]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.starts_with("error[usage]:"), "{err}");
}
