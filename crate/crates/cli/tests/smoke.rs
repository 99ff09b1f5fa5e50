//! End-to-end smoke test of the binary: run, report, figures.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safempc"))
}

#[test]
fn run_report_figures_round_trip() {
    let dir = std::env::temp_dir().join(format!("safempc-smoke-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.txt");
    fs::write(
        &config,
        "experiment = scalar\nepochs = 3\nsteps_per_epoch = 5\n",
    )
    .unwrap();

    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--gate", "backtracking", "--seed", "11", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("trace.jsonl").is_file());

    let out = bin().args(["report", "--trace"]).arg(&dir).output().unwrap();
    assert!(
        out.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("state_violations"), "stdout: {stdout}");
    assert!(dir.join("report.json").is_file());

    let out = bin()
        .args(["figures", "--trace"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "figures failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let figures: Vec<_> = fs::read_dir(dir.join("figures"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(figures.iter().any(|f| f == "state.csv"), "{figures:?}");
    assert!(figures.iter().any(|f| f == "plots.gp"), "{figures:?}");

    // Contradictory experiment selection is rejected.
    let out = bin()
        .args(["run", "--experiment", "tube", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(!out.status.success());

    cleanup(&dir);
}

fn cleanup(dir: &Path) {
    let _ = fs::remove_dir_all(dir);
}
