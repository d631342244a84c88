use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn wkh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wkh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(p).unwrap();
    assert!(!text.contains('\r'), "LF line endings");
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let mut rows = Vec::new();
    let mut reader = csv::ReaderBuilder::new().from_path(p).unwrap();
    for r in reader.records() {
        rows.push(r.unwrap().iter().map(String::from).collect());
    }
    (header, rows)
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(name);
    let schema = read_json(&path);
    jsonschema::JSONSchema::compile(&schema).expect("schema compiles")
}

fn assert_valid(schema_name: &str, doc: &Value) {
    let s = schema(schema_name);
    let msgs: Vec<String> = match s.validate(doc) {
        Ok(()) => Vec::new(),
        Err(errors) => errors
            .map(|e| format!("{e} at {}", e.instance_path))
            .collect(),
    };
    assert!(msgs.is_empty(), "{schema_name}: {msgs:?}");
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn simulate_converges_to_the_symmetric_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let o = wkh(&[
        "simulate",
        "--gamma",
        "0.4",
        "--attractiveness",
        "1,1,1",
        "--j0",
        "0.1,0.2,0.3",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["t", "J_1", "J_2", "J_3", "residual"]);
    let last = rows.last().unwrap();
    for v in &last[1..4] {
        assert!((f(v) - 5.0 / 6.0).abs() < 1e-6);
    }
    // 17 significant digits: mantissa digits before the exponent.
    let mantissa = last[1].split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(mantissa.len(), 17);
    let events = read_json(&PathBuf::from(format!("{}.events.json", out.display())));
    assert_valid("events.schema.json", &events);
    assert_eq!(events["converged"], Value::Bool(true));
}

#[test]
fn simulate_from_equilibrium_converges_at_time_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eq.csv");
    let v = format!("{0},{0},{0}", 5.0f64 / 6.0);
    let o = wkh(&[
        "simulate",
        "--gamma",
        "0.4",
        "--attractiveness",
        "1,1,1",
        "--j0",
        &v,
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let events = read_json(&PathBuf::from(format!("{}.events.json", out.display())));
    let conv: Vec<_> = events["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "converged")
        .collect();
    assert_eq!(conv.len(), 1);
    assert_eq!(conv[0]["time"].as_f64().unwrap(), 0.0);
}

#[test]
fn simulate_reports_original_seller_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("perm.csv");
    // Seller 1 is the most attractive; it must end up with the largest J_1.
    let o = wkh(&[
        "simulate",
        "--gamma",
        "1.6",
        "--attractiveness",
        "3,1,2",
        "--j0",
        "0,0,0",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv(&out);
    let last: Vec<f64> = rows.last().unwrap()[1..4].iter().map(|s| f(s)).collect();
    assert!(last[0] > last[2] && last[2] > last[1], "{last:?}");
    let events = read_json(&PathBuf::from(format!("{}.events.json", out.display())));
    let top = events["events"]
        .as_array()
        .unwrap()
        .iter()
        .rev()
        .find(|e| e["kind"] == "entered_trapping_set")
        .unwrap();
    assert_eq!(top["top"], 1);
}

#[test]
fn negative_gamma_is_a_config_error_naming_the_field() {
    let o = wkh(&[
        "simulate",
        "--gamma",
        "-0.4",
        "--attractiveness",
        "1,1,1",
        "--j0",
        "0,0,0",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"gamma": 0.4, "attractiveness": [1, 1, 1], "gama": 1}"#,
    )
    .unwrap();
    let o = wkh(&["equilibria", "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gama"));
}

#[test]
fn config_file_validates_against_schema_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let doc = serde_json::json!({
        "gamma": 0.2857142857142857,
        "attractiveness": [1, 1, 1],
        "format": "json",
        "equilibria": { "solver": "auto", "starts": 100 }
    });
    assert_valid("config.schema.json", &doc);
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let out = dir.path().join("eq.json");
    let o = wkh(&[
        "equilibria",
        "--config",
        path_str(&cfg),
        "--gamma",
        "0.4",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out);
    assert_valid("equilibria.schema.json", &v);
    assert_eq!(v["count"], 1);
}

#[test]
fn equilibria_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], usize); 3] = [
        (
            &["--gamma", "0.2857142857142857", "--attractiveness", "1,1,1"],
            7,
        ),
        (&["--gamma", "0.4", "--attractiveness", "1,1,1"], 1),
        (&["--gamma", "0.8", "--attractiveness", "1,2"], 1),
    ];
    for (k, (args, expected)) in cases.iter().enumerate() {
        let out = dir.path().join(format!("e{k}.csv"));
        let mut a = vec!["equilibria", "--out", path_str(&out)];
        a.extend_from_slice(args);
        let o = wkh(&a);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let (header, rows) = read_csv(&out);
        assert_eq!(header.last().unwrap(), "provenance");
        assert_eq!(rows.len(), *expected, "{args:?}");
    }
}

#[test]
fn equilibria_json_matches_schema_and_counts_stable_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.json");
    let o = wkh(&[
        "equilibria",
        "--gamma",
        "0.2857142857142857",
        "--attractiveness",
        "1,1,1",
        "--format",
        "json",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0);
    let v = read_json(&out);
    assert_valid("equilibria.schema.json", &v);
    let stable = v["points"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["stability"] == "stable")
        .count();
    assert_eq!(stable, 3);
}

#[test]
fn multistart_solver_is_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let o = wkh(&[
        "equilibria",
        "--gamma",
        "0.3",
        "--attractiveness",
        "1,1.3,1.7,2",
        "--solver",
        "multistart",
        "--starts",
        "200",
        "--format",
        "json",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out);
    assert_valid("equilibria.schema.json", &v);
    assert_eq!(v["solver"], "multistart_newton");
    assert!(v["count"].as_u64().unwrap() >= 1);
}

#[test]
fn sweep_two_seller_has_one_threshold_in_bracket() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = wkh(&["sweep", "--attractiveness", "1,2", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["gamma", "branch", "delta_1", "stability"]);
    assert!(!rows.is_empty());
    let t = read_json(&PathBuf::from(format!("{}.thresholds.json", out.display())));
    assert_valid("thresholds.schema.json", &t);
    let th = t["thresholds"].as_array().unwrap();
    assert_eq!(th.len(), 1);
    let g = th[0]["gamma"].as_f64().unwrap();
    assert!(g > 0.0 && g < 0.75);
}

#[test]
fn sweep_two_cluster_is_non_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let o = wkh(&["sweep", "--cluster", "8,7,1,1.5", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = read_json(&PathBuf::from(format!("{}.thresholds.json", out.display())));
    assert_valid("thresholds.schema.json", &t);
    assert_eq!(t["regime_string"], "3,1,3,1");
    assert_eq!(t["thresholds"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_homogeneous_finds_a_over_n() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.csv");
    let o = wkh(&[
        "sweep",
        "--attractiveness",
        "1,1,1",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = read_json(&PathBuf::from(format!("{}.thresholds.json", out.display())));
    assert!(t["thresholds"]
        .as_array()
        .unwrap()
        .iter()
        .any(|x| (x["gamma"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-9));
}

#[test]
fn sweep_rejects_mismatched_regime() {
    let o = wkh(&[
        "sweep",
        "--attractiveness",
        "1,2,3",
        "--regime",
        "two_seller",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("regime"));
}

fn stream_rows(gamma: &str, range: &str, dir: &Path) -> Vec<[f64; 4]> {
    let out = dir.join(format!("sf{gamma}.csv"));
    let o = wkh(&[
        "streamfield",
        "--gamma",
        gamma,
        "--attractiveness",
        "1,1,1",
        "--range",
        range,
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["delta_1", "delta_2", "g_1", "g_2"]);
    rows.iter()
        .map(|r| [f(&r[0]), f(&r[1]), f(&r[2]), f(&r[3])])
        .collect()
}

/// Grid points where |G| is a local minimum over the 3x3 neighbourhood
/// and small compared with the grid spacing.
fn grid_zeros(rows: &[[f64; 4]], n: usize) -> Vec<(f64, f64)> {
    let norm = |i: usize, j: usize| {
        let r = rows[i * n + j];
        r[2].hypot(r[3])
    };
    let mut out = Vec::new();
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let g = norm(i, j);
            let is_min = (i - 1..=i + 1).all(|a| (j - 1..=j + 1).all(|b| norm(a, b) >= g));
            if is_min && g < 0.03 {
                out.push((rows[i * n + j][0], rows[i * n + j][1]));
            }
        }
    }
    out
}

#[test]
fn streamfield_has_one_zero_at_two_fifths() {
    let dir = tempfile::tempdir().unwrap();
    let rows = stream_rows("0.4", "-3,3", dir.path());
    assert_eq!(rows.len(), 201 * 201);
    let zeros = grid_zeros(&rows, 201);
    assert_eq!(zeros.len(), 1, "{zeros:?}");
    assert!(zeros[0].0.abs() < 0.05 && zeros[0].1.abs() < 0.05);
}

#[test]
fn streamfield_zeros_match_the_seven_points() {
    let dir = tempfile::tempdir().unwrap();
    // Three of the seven points have |Δ| > 3, so widen the default window.
    let rows = stream_rows("0.2857142857142857", "-4,4", dir.path());
    let zeros = grid_zeros(&rows, 201);
    // Projected equilibria from the enumerator, Δ_i = J_i - J_3.
    let out = dir.path().join("e.json");
    let o = wkh(&[
        "equilibria",
        "--gamma",
        "0.2857142857142857",
        "--attractiveness",
        "1,1,1",
        "--format",
        "json",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 0);
    let pts: Vec<(f64, f64)> = read_json(&out)["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let s: Vec<f64> = p["state"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            (s[0] - s[2], s[1] - s[2])
        })
        .collect();
    assert_eq!(zeros.len(), pts.len(), "{zeros:?}");
    for (x, y) in pts {
        assert!(
            zeros
                .iter()
                .any(|&(a, b)| (a - x).abs() <= 0.04 && (b - y).abs() <= 0.04),
            "no grid zero near ({x}, {y})"
        );
    }
}

#[test]
fn streamfield_zero_row_is_the_difference_field() {
    // G_i = -γΔ_i + (a e^{Δ_i} - a)/(1 + e^{Δ_1} + e^{Δ_2}), at Δ_1 = 0.
    let dir = tempfile::tempdir().unwrap();
    let rows = stream_rows("0.4", "-3,3", dir.path());
    let gamma = 0.4;
    for r in rows.iter().filter(|r| r[0] == 0.0) {
        let d2 = r[1];
        let denom = 2.0 + d2.exp();
        assert_eq!(r[2], 0.0);
        let g2 = -gamma * d2 + (d2.exp() - 1.0) / denom;
        assert!(
            (r[3] - g2).abs() < 1e-15 * (1.0 + g2.abs()),
            "{} vs {g2}",
            r[3]
        );
    }
}

#[test]
fn streamfield_needs_three_sellers() {
    let o = wkh(&["streamfield", "--gamma", "0.4", "--attractiveness", "1,1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_on_figure_parameters() {
    let dir = tempfile::tempdir().unwrap();
    for gamma in ["0.4", "0.2857142857142857"] {
        let out = dir.path().join(format!("v{gamma}.json"));
        let o = wkh(&[
            "verify",
            "--gamma",
            gamma,
            "--attractiveness",
            "1,1,1",
            "--out",
            path_str(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v = read_json(&out);
        assert_valid("verify.schema.json", &v);
        assert_eq!(v["all_passed"], true);
    }
}

#[test]
fn verify_corrupted_field_fails_with_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad.json");
    let o = wkh(&[
        "verify",
        "--gamma",
        "0.4",
        "--attractiveness",
        "1,1,1",
        "--corrupt-field",
        "0.05",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code(&o), 1);
    let v = read_json(&out);
    assert_valid("verify.schema.json", &v);
    let failed: Vec<_> = v["reports"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["verdict"] == "fail")
        .collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|r| r["counterexample"].is_object()));
}

#[test]
fn verify_unknown_check_is_a_config_error() {
    let o = wkh(&[
        "verify",
        "--gamma",
        "0.4",
        "--attractiveness",
        "1,1,1",
        "--checks",
        "no_such_check",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such_check"));
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let o = wkh(&[
        "equilibria",
        "--gamma",
        "0.4",
        "--attractiveness",
        "1,1,1",
        "--out",
        "/nonexistent-dir/x.csv",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("out"));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for t in ["1", "4"] {
        let out = dir.path().join(format!("t{t}.json"));
        let o = wkh(&[
            "verify",
            "--gamma",
            "0.2857142857142857",
            "--attractiveness",
            "1,1,1",
            "--threads",
            t,
            "--seed",
            "3",
            "--out",
            path_str(&out),
        ]);
        assert_eq!(code(&o), 0);
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
