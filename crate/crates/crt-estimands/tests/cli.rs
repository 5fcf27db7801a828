//! End-to-end tests of the command-line interface.

use std::fs;
use std::process::Command;

use crt_estimands::{fixture_ex1, fixture_po1, StudyReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crt-estimands"))
}

fn ex1_csv() -> String {
    let mut body = String::from("cluster_id,treatment,outcome\n");
    for c in fixture_ex1().clusters() {
        for &y in &c.outcomes {
            body.push_str(&format!("{},{},{y}\n", c.cluster_id, u8::from(c.treatment)));
        }
    }
    body
}

fn po1_csv() -> String {
    let mut body = String::from("cluster_id,y1,y0\n");
    for c in fixture_po1().clusters() {
        for (y1, y0) in c.y1.iter().zip(&c.y0) {
            body.push_str(&format!("{},{y1},{y0}\n", c.cluster_id));
        }
    }
    body
}

#[test]
fn analyze_text_table_has_all_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ex1.csv");
    fs::write(&input, ex1_csv()).unwrap();
    let out = bin().args(["analyze", "--input"]).arg(&input).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("Odds ratio (95% CI)"));
    assert!(text.contains("IEEs (unweighted)"));
    assert!(text.contains("GEEs with exchangeable correlation"));
    assert!(text.contains("Mixed-effects logistic regression"));
    assert!(text.contains("Cluster-specific, cluster-average"));
    assert!(text.contains("4.00"));
    assert!(text.contains("3.00"));
}

#[test]
fn analyze_difference_measure_and_size_filter() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ex1.csv");
    fs::write(&input, ex1_csv()).unwrap();
    let out = bin()
        .args(["analyze", "--input"])
        .arg(&input)
        .args(["--measure", "diff"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("Difference (95% CI)"));

    // Filtering to size >= 3 keeps only the two size-4 clusters, which
    // leaves a single cluster per arm; every cell fails.
    let out = bin()
        .args(["analyze", "--input"])
        .arg(&input)
        .args(["--min-cluster-size", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truth_reports_all_four_estimands() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("po1.csv");
    fs::write(&input, po1_csv()).unwrap();
    let out = bin()
        .args(["truth", "--input"])
        .arg(&input)
        .args(["--rho", "0.5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("marginal_participant_average_odds_ratio = 4.0000000000"));
    assert!(text.contains("marginal_cluster_average_odds_ratio = 2.7777777778"));
    assert!(text.contains("cluster_specific_cluster_average_odds_ratio = 3.0000000000"));
    assert!(text.contains("marginal_participant_average_difference = 0.3333333333"));
    // 3/11 at rho = 0.5
    assert!(text.contains("precision_weighted_difference(rho=0.5) = 0.2727272727"));
}

const CONFIG: &str = r#"
n_clusters = 12
outcome_kind = "binary"
control_level = -1.0
random_intercept_sd = 0.3
seed = 42

[[strata]]
size = 10
probability = 0.6
effect = 0.5

[[strata]]
size = 40
probability = 0.4
effect = 0.9
"#;

#[test]
fn simulate_writes_loadable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dgp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out_dir = dir.path().join("sims");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--replicates", "2"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for rep in 0..2 {
        let obs = crt_estimands::load_observed_csv(
            &out_dir.join(format!("observed_{rep:04}.csv")),
        )
        .unwrap();
        let po = crt_estimands::load_potential_csv(
            &out_dir.join(format!("potential_{rep:04}.csv")),
        )
        .unwrap();
        assert_eq!(obs.n_clusters(), 12);
        assert_eq!(po.n_clusters(), 12);
        assert_eq!(obs.n_participants(), po.n_participants());
    }
}

#[test]
fn verify_writes_parseable_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dgp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let report_path = dir.path().join("report.json");
    let out = bin()
        .args(["verify", "--config"])
        .arg(&cfg)
        .args(["--replicates", "5", "--out"])
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: StudyReport =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.replicates, 5);
    assert_eq!(report.cells.len(), 8);
    assert!(report.informative);
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dgp.toml");
    fs::write(&cfg, "n_clusters = 2\n").unwrap();
    let out = bin()
        .args(["verify", "--config"])
        .arg(&cfg)
        .args(["--replicates", "2", "--out"])
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
