//! End-to-end checks of the `mdlm` binary: flag handling, output files,
//! and the exit-code contract (0 success, 1 verification failure, 2 usage
//! or IO error).

use std::path::Path;
use std::process::{Command, Output};

fn mdlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Small-model flags shared by most tests to keep runs fast.
const SMALL: &[&str] = &[
    "--n-layers",
    "2",
    "--d-model",
    "32",
    "--n-heads",
    "4",
    "--n-kv-heads",
    "4",
    "--d-ff",
    "64",
    "--vocab-size",
    "64",
];

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn generate_writes_budgeted_tokens_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fresh/run"); // missing dirs are created
    let mut args = vec![
        "generate", "--seed", "0", "--tau", "0.99", "--l-p", "16", "--l-r", "64", "--n-u", "1",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", out.to_str().unwrap()]);
    let result = mdlm(&args);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );

    let tokens = read(&out, "tokens.txt");
    assert_eq!(tokens.lines().count(), 64);
    let metrics = read(&out, "step_metrics.csv");
    // 64 steps x 2 layers + header.
    assert_eq!(metrics.lines().count(), 1 + 64 * 2);
    for name in [
        "salient_counts.csv",
        "similarity_hist.csv",
        "run_report.json",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn forced_all_salient_matches_oracle_token_file() {
    let tmp = tempfile::tempdir().unwrap();
    let forced = tmp.path().join("forced");
    let oracle = tmp.path().join("oracle");

    let mut args = vec![
        "generate",
        "--seed",
        "7",
        "--l-p",
        "8",
        "--l-r",
        "16",
        "--block-size",
        "8",
        "--force-mode",
        "all-salient",
        "--no-response-only",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", forced.to_str().unwrap()]);
    assert!(mdlm(&args).status.success());

    let mut args = vec![
        "generate",
        "--seed",
        "7",
        "--l-p",
        "8",
        "--l-r",
        "16",
        "--block-size",
        "8",
        "--oracle",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", oracle.to_str().unwrap()]);
    assert!(mdlm(&args).status.success());

    assert_eq!(read(&forced, "tokens.txt"), read(&oracle, "tokens.txt"));
}

#[test]
fn generate_into_unwritable_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let bad = blocker.join("nested"); // path through a regular file
    let mut args = vec!["generate", "--l-p", "8", "--l-r", "8", "--block-size", "8"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", bad.to_str().unwrap()]);
    let result = mdlm(&args);
    assert_eq!(result.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&result.stderr).is_empty());
}

#[test]
fn unknown_flag_exits_2() {
    let result = mdlm(&["generate", "--no-such-flag"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn missing_weight_file_exits_2() {
    let result = mdlm(&["generate", "--weights", "/nonexistent/w.bin", "--l-r", "8"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn compare_reports_equivalence_for_all_salient() {
    let mut args = vec![
        "compare",
        "--seed",
        "3",
        "--l-p",
        "8",
        "--l-r",
        "16",
        "--block-size",
        "8",
        "--force-mode",
        "all-salient",
        "--no-response-only",
    ];
    args.extend_from_slice(SMALL);
    let result = mdlm(&args);
    assert!(result.status.success());
    let stdout = String::from_utf8(result.stdout).unwrap();
    assert!(stdout.contains("tokens_identical,true"), "{stdout}");
    assert!(stdout.contains("flop_ratio,1"), "{stdout}");
}

#[test]
fn sweep_tau_rows_ordered_and_bounded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep-tau",
        "--taus",
        "0.99,-2,2",
        "--seed",
        "5",
        "--l-p",
        "8",
        "--l-r",
        "16",
        "--block-size",
        "8",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", tmp.path().to_str().unwrap()]);
    let result = mdlm(&args);
    assert!(result.status.success());

    let csv = read(tmp.path(), "tau_sweep.csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "tau,avg_salient_fraction,flop_ratio,tokens_match_oracle"
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    // Rows come out in ascending tau order regardless of input order.
    let taus: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(taus, vec![-2.0, 0.99, 2.0]);
    let fractions: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(fractions.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(fractions[0], 0.0); // nothing selected below -1
    assert_eq!(fractions[2], 1.0); // everything selected above 1
                                   // The all-cached run does the least work of any setting.
    let ratios: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(ratios[0] <= ratios[1] && ratios[0] <= ratios[2]);
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let ok = mdlm(&["verify", "--trials", "100", "--l-p", "8", "--l-r", "16"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert!(
        stdout.contains("max_ratio"),
        "bound report line missing: {stdout}"
    );
    assert!(!stdout.contains("FAIL"));

    let bad = mdlm(&[
        "verify",
        "--trials",
        "100",
        "--l-p",
        "8",
        "--l-r",
        "16",
        "--inject-fault",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn cost_model_emits_reference_rows_and_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let result = mdlm(&[
        "cost-model",
        "--n-u-list",
        "1,2",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let csv = read(tmp.path(), "cost_model.csv");
    assert!(csv.contains("prefix,1024,256,32,1,144,1280,179.5"));
    assert!(csv.contains("dual,1024,256,32,1,32,1280,71"));
    assert!(csv.contains("dual,1024,256,32,2,32,1280,110"));

    let bad = mdlm(&["cost-model", "--n-u-list", "5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn prompt_file_overrides_synthetic_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let prompt_path = tmp.path().join("prompt.txt");
    std::fs::write(&prompt_path, "1 2 3\n4 5").unwrap();
    let out = tmp.path().join("out");
    let mut args = vec![
        "generate",
        "--l-r",
        "8",
        "--block-size",
        "8",
        "--prompt-file",
        prompt_path.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", out.to_str().unwrap()]);
    assert!(mdlm(&args).status.success());

    // Bad token ids are a config error.
    std::fs::write(&prompt_path, "1 999").unwrap();
    let result = mdlm(&args);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn dump_caches_writes_per_layer_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "generate",
        "--l-p",
        "8",
        "--l-r",
        "8",
        "--block-size",
        "8",
        "--dump-caches",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", tmp.path().to_str().unwrap()]);
    assert!(mdlm(&args).status.success());
    for l in 0..2 {
        for name in ["k", "v", "c", "ffn_out"] {
            let path = tmp.path().join(format!("cache_layer{l}_{name}.csv"));
            assert!(path.exists(), "missing {path:?}");
            // 16 rows: one line per global position.
            assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 16);
        }
    }
}
