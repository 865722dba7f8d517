use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swizzlelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_two_reports_and_a_positive_delta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "simulate",
        "--kernel",
        "gemm",
        "--pattern",
        "gemm_contiguous",
        "--out-dir",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let base: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("baseline.json")).unwrap()).unwrap();
    let swz: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("swizzled.json")).unwrap()).unwrap();
    assert_eq!(base["pattern"], "identity");
    assert_eq!(swz["pattern"], "gemm_contiguous");
    assert!(swz["l2_hit_rate"].as_f64().unwrap() > base["l2_hit_rate"].as_f64().unwrap());
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn simulate_identity_has_zero_delta() {
    let o = run(&[
        "simulate",
        "--kernel",
        "transpose",
        "--size",
        "512",
        "--pattern",
        "identity",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).trim_end().ends_with("(+0.00 points)"), "{}", stdout(&o));
}

#[test]
fn simulate_accepts_an_expression() {
    let o = run(&[
        "simulate",
        "--kernel",
        "gemm",
        "--size",
        "256",
        "--expr",
        "(pid % 8) * (num_blocks // 8) + pid // 8",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&["simulate", "--kernel", "gemm", "--size", "256", "--expr", "pid * 2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_rejects_bitwise_on_non_power_of_four_grid() {
    let o = run(&[
        "simulate",
        "--kernel",
        "gemm",
        "--size",
        "640",
        "--pattern",
        "bitwise_lowbit",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("power of four"), "{}", stderr(&o));
}

#[test]
fn sweep_stencil_delta_does_not_shrink() {
    let o = run(&["sweep", "--kernel", "stencil2d", "--sizes", "512,1024,2048,4096"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("kernel,pattern,size,baseline_rate,swizzled_rate,delta\n"));
    let rows = csv_rows(&text);
    let sizes: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(sizes, ["512", "1024", "2048", "4096"]);
    let deltas: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(deltas.windows(2).all(|w| w[1] >= w[0] - 0.01), "{deltas:?}");
}

#[test]
fn sweep_single_size_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep",
        "--kernel",
        "softmax",
        "--sizes",
        "256",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&fs::read_to_string(dir.path().join("sweep.csv")).unwrap());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][..3], ["softmax", "softmax_rowgroup", "256"]);
}

#[test]
fn sweep_output_is_deterministic() {
    let a = run(&["sweep", "--kernel", "gemm", "--sizes", "512,256"]);
    let b = run(&["sweep", "--kernel", "gemm", "--sizes", "512,256"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn sweep_usage_errors() {
    assert_eq!(
        run(&["sweep", "--kernel", "stencil2d", "--sizes", ""]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["sweep", "--kernel", "stencil2d"]).status.code(), Some(2));
    assert_eq!(
        run(&["sweep", "--kernel", "nope", "--sizes", "64"]).status.code(),
        Some(2)
    );
}

fn progression(dir: &Path) -> Vec<Vec<String>> {
    csv_rows(&fs::read_to_string(dir.join("progression.csv")).unwrap())
}

#[test]
fn optimize_search_writes_history_progression_and_best() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "optimize",
        "--kernel",
        "gemm",
        "--size",
        "512",
        "--max-iters",
        "5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let history = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 6);
    let rows = progression(dir.path());
    assert_eq!(rows.len(), 6);
    let best_so_far: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(best_so_far.windows(2).all(|w| w[0] <= w[1]));
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("best.json")).unwrap()).unwrap();
    let baseline: f64 = rows[0][1].parse().unwrap();
    assert!(best["report"]["l2_hit_rate"].as_f64().unwrap() >= baseline);
}

#[test]
fn optimize_zero_iterations_keeps_identity() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "optimize",
        "--kernel",
        "gemm",
        "--size",
        "256",
        "--max-iters",
        "0",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("best.json")).unwrap()).unwrap();
    assert_eq!(best["iteration"], 0);
    assert_eq!(best["pattern"]["name"], "identity");
}

#[test]
fn optimize_replay_stops_when_the_list_runs_out() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("patterns.jsonl");
    fs::write(
        &fixture,
        concat!(
            r#"{"name":"identity","exprs":["pid"]}"#,
            "\n",
            r#"{"name":"swap","exprs":["((pid >> 1) & 1431655765) | ((pid & 1431655765) << 1)"]}"#,
            "\n",
            r#"{"name":"contiguous","exprs":["(pid % num_xcds) * (num_blocks // num_xcds) + pid // num_xcds"]}"#,
            "\n"
        ),
    )
    .unwrap();
    let history = dir.path().join("h.jsonl");
    let o = run(&[
        "optimize",
        "--kernel",
        "gemm",
        "--size",
        "640",
        "--proposer",
        "replay",
        "--fixture",
        fixture.to_str().unwrap(),
        "--max-iters",
        "5",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--history",
        history.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("stopped after 3 attempts"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 4);
    let rows = progression(dir.path());
    assert_eq!(rows[2][1], "", "non-bijective candidate has no rate");
}

#[test]
fn optimize_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        run(&["optimize", "--proposer", "replay", "--out-dir", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["optimize", "--proposer", "magic", "--out-dir", out])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("missing.jsonl");
    let o = run(&[
        "optimize",
        "--proposer",
        "llm",
        "--fixture",
        missing.to_str().unwrap(),
        "--out-dir",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_verdicts() {
    let ok = run(&["validate", "--pattern", "identity", "--blocks", "10"]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = run(&["validate", "--pattern", "bitwise_lowbit", "--blocks", "10"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains('5'), "{}", stdout(&bad));
    let gemm = run(&[
        "validate",
        "--pattern",
        "gemm_contiguous",
        "--blocks",
        "304",
        "--xcds",
        "8",
    ]);
    assert_eq!(gemm.status.code(), Some(0), "{}", stdout(&gemm));
    let grid = run(&["validate", "--pattern", "softmax_rowgroup", "--grid", "9x3"]);
    assert_eq!(grid.status.code(), Some(0));
    let kernel = run(&["validate", "--kernel", "fdtd2d"]);
    assert_eq!(kernel.status.code(), Some(0));
}

#[test]
fn validate_usage_errors() {
    assert_eq!(run(&["validate", "--pattern", "identity"]).status.code(), Some(2));
    assert_eq!(
        run(&["validate", "--pattern", "nope", "--blocks", "4"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["validate", "--expr", "pid +", "--blocks", "4"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["validate", "--pattern", "identity", "--grid", "3by4"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn custom_arch_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.json");
    fs::write(
        &path,
        r#"{"name":"quad","num_xcds":4,"cus_per_xcd":8,"l2_bytes_per_xcd":1048576,"l2_line_bytes":128,"l2_associativity":8,"wg_slots_per_cu":1,"dispatch":"round_robin_xcd"}"#,
    )
    .unwrap();
    let o = run(&[
        "simulate",
        "--kernel",
        "gemm",
        "--size",
        "256",
        "--arch",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains(r#""num_xcds":4"#) || stdout(&o).contains(r#""num_xcds": 4"#));
    fs::write(&path, r#"{"name":"broken"}"#).unwrap();
    assert_eq!(
        run(&["simulate", "--arch", path.to_str().unwrap()]).status.code(),
        Some(2)
    );
}
