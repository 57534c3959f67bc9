//! Runs the `trio` binary through a full desk-scale workflow.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use trio_cli::report::{BenchmarkReport, EvaluationRecord};
use trio_cli::ErrorReport;

fn trio(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trio"))
        .current_dir(dir)
        .env_remove("TRIO_DATA_DIR")
        .env_remove("TRIO_CONFIG")
        .env("TRIO_LOG", "warn")
        .args(args)
        .output()
        .expect("the binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = trio(dir, args);
    assert!(
        out.status.success(),
        "trio {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn status(v: &Value) -> &str {
    v["status"].as_str().unwrap()
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn workflow_from_synthetic_data_to_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let common = ["--data-dir", "data", "--cache-dir", "cache"];
    let with = |extra: &[&str]| -> Vec<String> {
        common.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let prepared = run(&[
        "prepare", "--synth", "20", "--val", "4", "--test", "4", "--seed", "3",
    ]);
    assert_eq!(status(&prepared), "ok");
    assert_eq!(prepared["dataset"]["train"], 12);
    let again = run(&[
        "prepare", "--synth", "20", "--val", "4", "--test", "4", "--seed", "3",
    ]);
    assert_eq!(status(&again), "skipped");

    let cached = run(&["cache-targets"]);
    assert_eq!(cached["written"], 20);
    assert_eq!(status(&run(&["cache-targets"])), "skipped");

    // identity stub: perfect imitation of the text projections
    let echo = run(&[
        "evaluate",
        "--echo",
        "--split",
        "test",
        "--out",
        "echo.json",
    ]);
    let record: EvaluationRecord = serde_json::from_value(echo.clone()).unwrap();
    assert_eq!(record.observations, 4);
    assert!(record.metrics.mse_t.value().unwrap() < 1e-12);
    assert!((record.metrics.r2_mean_t.value().unwrap() - 1.0).abs() < 1e-9);
    let skipped = run(&[
        "evaluate",
        "--echo",
        "--split",
        "test",
        "--out",
        "echo.json",
    ]);
    assert_eq!(status(&skipped), "skipped");

    let trained = run(&[
        "--checkpoint-dir",
        "encoders/tiny",
        "train",
        "--encoder",
        "tiny",
        "--epochs",
        "1",
        "--batch-size",
        "6",
        "--optimizer",
        "adam",
    ]);
    assert_eq!(trained["epochs_run"], 1);
    let resumed = run(&[
        "--checkpoint-dir",
        "encoders/tiny",
        "train",
        "--encoder",
        "tiny",
        "--epochs",
        "1",
        "--batch-size",
        "6",
        "--optimizer",
        "adam",
    ]);
    assert_eq!(status(&resumed), "skipped");

    run(&[
        "evaluate",
        "--checkpoint",
        "encoders/tiny",
        "--split",
        "test",
        "--raw",
        "--out",
        "tiny.json",
    ]);
    let timing = run(&[
        "bench-timing",
        "--encoder",
        "tiny",
        "--name",
        "tiny",
        "--dataset-size",
        "10",
        "--batch-size",
        "4",
        "--repeats",
        "2",
        "--out",
        "timing.json",
    ]);
    assert_eq!(
        (timing["batches"].as_u64(), timing["last_batch"].as_u64()),
        (Some(3), Some(2))
    );

    let text_out = trio(
        dir,
        &[
            "--output-dir",
            "out",
            "report",
            "--eval",
            "echo.json",
            "tiny.json",
            "--timing",
            "timing.json",
            "--save",
        ],
    );
    assert!(text_out.status.success());
    let text = String::from_utf8(text_out.stdout).unwrap();
    let report: BenchmarkReport = read(&dir.join("out/report.json"));
    assert_eq!(
        std::fs::read_to_string(dir.join("out/report.txt")).unwrap(),
        text
    );

    let row = |m: &str| report.rows.iter().find(|r| r.metric == m).unwrap();
    assert_eq!(row("mse_t").cells[0].text, "0.00000");
    assert_eq!(row("r2_mean_t").cells[0].text, "1.00000");
    assert_eq!(row("mse_t").best, "echo");
    assert_eq!(row("tau_seconds").best, "tiny");

    // one marker per metric line, and the text numbers are the JSON numbers
    for r in &report.rows {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(r.metric.as_str()))
            .unwrap();
        assert_eq!(line.matches('*').count(), 1, "{line}");
        let cells: Vec<&str> = line
            .split_whitespace()
            .skip(1)
            .filter(|c| *c != "(tie)")
            .collect();
        assert_eq!(cells.len(), report.columns.len());
        for (i, (c, cell)) in cells.iter().zip(&r.cells).enumerate() {
            let starred = c.ends_with('*');
            assert_eq!(starred, report.columns[i].encoder == r.best);
            let c = c.trim_end_matches('*');
            assert_eq!(c, cell.text);
            if let Some(v) = cell.value.and_then(|s| s.value()) {
                assert_eq!(c.parse::<f64>().unwrap(), v);
            }
        }
    }
    let json_out = ok(
        dir,
        &[
            "--output-dir",
            "out",
            "report",
            "--eval",
            "echo.json",
            "tiny.json",
            "--format",
            "json",
            "--save",
        ],
    );
    assert_eq!(
        serde_json::from_value::<BenchmarkReport>(json_out).unwrap(),
        report
    );

    let wav = std::fs::read_dir(dir.join("data/audio"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let wav = wav.to_str().unwrap();
    let gen_args = [
        "--output-dir",
        "out",
        "--encoders-dir",
        "encoders",
        "generate",
        "--audio",
        wav,
        "--audio-encoder",
        "tiny",
        "--text",
        "children playing",
        "--steps",
        "3",
        "--repeat",
        "2",
        "--seed",
        "5",
    ];
    let generated = ok(dir, &gen_args);
    assert_eq!(status(&generated), "ok");
    assert_eq!(generated["images"].as_array().unwrap().len(), 2);
    assert_eq!(generated["iterations"], serde_json::json!([3, 3]));
    let first = dir.join(generated["images"][0].as_str().unwrap());
    let bytes = std::fs::read(&first).unwrap();
    assert_eq!(status(&ok(dir, &gen_args)), "skipped");
    let mut forced = gen_args.to_vec();
    forced.push("--force");
    assert_eq!(status(&ok(dir, &forced)), "ok");
    assert_eq!(std::fs::read(&first).unwrap(), bytes);

    let sheets = ok(
        dir,
        &[
            "--output-dir",
            "out",
            "annotate-template",
            "--element",
            "A bus",
            "--element",
            "Clouds",
            "--annotator",
            "a1",
        ],
    );
    assert_eq!(sheets["sheets"], 2);
    let written: Vec<Value> = read(&dir.join("out/annotations.json"));
    assert_eq!(written[0]["presence"]["Clouds"], false);
}

#[test]
fn bench_timing_plan_mirrors_full_scale_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = ok(
        tmp.path(),
        &[
            "bench-timing",
            "--dataset-size",
            "23524",
            "--batch-size",
            "1000",
            "--repeats",
            "100",
            "--dry-run",
        ],
    );
    assert_eq!(plan["batches"], 24);
    assert_eq!(plan["last_batch"], 524);
}

#[test]
fn flags_beat_environment_beat_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("trio.toml"), "[paths]\ndata_dir = \"from_file\"\n").unwrap();
    let prepare = ["prepare", "--synth", "2"];

    ok(dir, &prepare);
    assert!(dir.join("from_file/manifest.jsonl").is_file());

    let out = Command::new(env!("CARGO_BIN_EXE_trio"))
        .current_dir(dir)
        .env("TRIO_DATA_DIR", "from_env")
        .env("TRIO_LOG", "warn")
        .args(prepare)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("from_env/manifest.jsonl").is_file());

    let out = Command::new(env!("CARGO_BIN_EXE_trio"))
        .current_dir(dir)
        .env("TRIO_DATA_DIR", "from_env")
        .env("TRIO_LOG", "warn")
        .args(["--data-dir", "from_flag"])
        .args(prepare)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("from_flag/manifest.jsonl").is_file());
}

#[test]
fn failures_are_json_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let parse = |out: &Output| -> ErrorReport {
        serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr is a JSON error")
    };

    let missing = trio(dir, &["prepare", "--synth", "2"]);
    assert_eq!(missing.status.code(), Some(2));
    let err = parse(&missing);
    assert_eq!(err.error.kind, "config");
    assert!(err.error.message.contains("data_dir"));

    std::fs::write(dir.join("bad.toml"), "[paths]\nnope = 1\n").unwrap();
    let bad = trio(dir, &["--config", "bad.toml", "bench-timing", "--dry-run"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(parse(&bad).error.kind, "config");

    let usage = trio(dir, &["no-such-command"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(parse(&usage).error.kind, "config");

    let steps = trio(
        dir,
        &[
            "--output-dir",
            "o",
            "generate",
            "--text",
            "x",
            "--steps",
            "0",
        ],
    );
    assert_eq!(steps.status.code(), Some(1));
    let err = parse(&steps);
    assert_eq!(err.error.kind, "diffusion");
    assert!(err.error.message.contains("steps"));

    let empty = trio(dir, &["--data-dir", "nothing", "cache-targets", "--force"]);
    assert_eq!(empty.status.code(), Some(1));
    assert_eq!(parse(&empty).error.kind, "dataset");
}
