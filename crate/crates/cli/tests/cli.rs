use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cetsim");

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn cetsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn cetsim_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(BIN).args(args).env(key, val).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    cetsim(&args)
}

fn rows(csv: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(csv).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

const SMALL: &str = r#"
seed = 11
rounds_per_point = 3

[[sweep]]
scenario = "Daytime"
snr_db = [25.0]
variants = ["GFM", "PIM(P+M)"]
"#;

#[test]
fn gfm_and_pim_at_25_db() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = simulate(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = rows(&out.join("results.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let acc: f64 = r[6].parse().unwrap();
        let total: f64 = r[9].parse().unwrap();
        match r[1].as_str() {
            "GFM" => assert!((acc - 0.769).abs() < 1e-3, "{acc}"),
            "PIM(P+M)" => assert!((5.0..=10.0).contains(&total), "{total}"),
            other => panic!("unexpected variant {other}"),
        }
    }
}

#[test]
fn header_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    assert!(simulate(&cfg, &out, &[]).status.success());
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "mode,variant,scenario,snr_db,seed,round,accuracy,inference_ms,transmission_ms,total_ms,flops_g,memory_mb,bytes_tx,attacks_hit,defenses_hit"
    );
}

#[test]
fn unknown_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{SMALL}\n[controller]\nbudget = 1.0\n"));
    let o = simulate(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 11") && err.contains("budget"), "{err}");
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(&dir.path().join("nope.toml"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn broken_calibration_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = CALIBRATION_TEXT.replace("\"PIM(P+I)\"   = 0.690", "\"PIM(P+I)\"   = 0.900");
    write(dir.path(), "cal.toml", &bad);
    let cfg = write(dir.path(), "c.toml", &format!("calibration = \"cal.toml\"\n{SMALL}"));
    let o = simulate(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn relative_calibration_path_is_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cal.toml", CALIBRATION_TEXT);
    let cfg = write(dir.path(), "c.toml", &format!("calibration = \"cal.toml\"\n{SMALL}"));
    let out = dir.path().join("out");
    assert!(simulate(&cfg, &out, &[]).status.success());
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("cal.toml"));
    assert!(manifest.contains("calibration_sha256"));
}

const CALIBRATION_TEXT: &str = include_str!("../../core/data/table2_fig4_default.toml");

#[test]
fn validate_shipped_calibration() {
    let o = cetsim(&["validate-calibration", s(&repo_file("crates/core/data/table2_fig4_default.toml"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS anchor-reproduction"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn validate_flags_subset_violation() {
    let dir = tempfile::tempdir().unwrap();
    let bad = CALIBRATION_TEXT.replace("\"PIM(P+I)\"   = 0.690", "\"PIM(P+I)\"   = 0.790");
    let p = write(dir.path(), "bad.toml", &bad);
    let o = cetsim(&["validate-calibration", s(&p)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("subset-monotonicity"), "{}", stderr(&o));
    assert!(stdout(&o).contains("FAIL subset-monotonicity"));
}

#[test]
fn validate_flags_missing_variant() {
    let dir = tempfile::tempdir().unwrap();
    let bad: String = CALIBRATION_TEXT
        .lines()
        .filter(|l| !l.starts_with("\"CRM(P+C+M)\""))
        .map(|l| format!("{l}\n"))
        .collect();
    let p = write(dir.path(), "bad.toml", &bad);
    let o = cetsim(&["validate-calibration", s(&p)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("MissingVariant") && err.contains("CRM(P+C+M)"), "{err}");
}

#[test]
fn manifest_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("rounds_per_point = 3", "rounds_per_point = 5"));
    let first = dir.path().join("a");
    assert!(simulate(&cfg, &first, &["--seed", "1234", "--sample-outcomes"]).status.success());
    let second = dir.path().join("b");
    let o = simulate(&first.join("manifest.toml"), &second, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.join("results.csv")).unwrap(),
        std::fs::read(second.join("results.csv")).unwrap()
    );
    assert!(rows(&first.join("results.csv")).iter().all(|r| r[4] == "1234"));
}

#[test]
fn sampled_outcomes_are_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("rounds_per_point = 3", "rounds_per_point = 40"));
    let out = dir.path().join("out");
    assert!(simulate(&cfg, &out, &["--sample-outcomes"]).status.success());
    let accs: Vec<String> = rows(&out.join("results.csv")).into_iter().map(|r| r[6].clone()).collect();
    assert!(accs.iter().all(|a| a == "1.000000" || a == "0.000000"));
    assert!(accs.iter().any(|a| a == "1.000000") && accs.iter().any(|a| a == "0.000000"));
}

#[test]
fn thread_cap_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_file("configs/attacks.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path| -> Vec<String> {
        vec!["simulate".into(), "--config".into(), s(&cfg).into(), "--out".into(), s(out).into()]
    };
    let aa = args(&a);
    let bb = args(&b);
    let ra: Vec<&str> = aa.iter().map(String::as_str).collect();
    let rb: Vec<&str> = bb.iter().map(String::as_str).collect();
    assert!(cetsim_env(&ra, "CETSIM_THREADS", "1").status.success());
    assert!(cetsim_env(&rb, "CETSIM_THREADS", "8").status.success());
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn row_count_matches_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
seed = 5
rounds_per_point = 4

[[sweep]]
scenario = "Daytime"
snr_db = [0.0, 10.0]
variants = ["GFM", "CRM(P+I+M)", "PIM(P+C)"]

[[sweep]]
scenario = "Nighttime"
snr_db = [5.0]
variants = ["PIM(P+I)"]
"#;
    let cfg = write(dir.path(), "c.toml", text);
    let out = dir.path().join("out");
    assert!(simulate(&cfg, &out, &[]).status.success());
    assert_eq!(rows(&out.join("results.csv")).len(), (2 * 3 + 1) * 4);
}

#[test]
fn auto_sweep_follows_link_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = simulate(&repo_file("configs/auto.toml"), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = rows(&out.join("results.csv"));
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r[0] != "GFM"));
    for r in &rows {
        assert!(r[9].parse::<f64>().unwrap() <= 25.0);
    }
}

#[test]
fn auto_sweep_skips_impossible_budget() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#"["GFM", "PIM(P+M)"]"#, r#""auto""#) + "\n[controller]\nlatency_budget_s = 0.0001\n";
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    assert!(simulate(&cfg, &out, &[]).status.success());
    assert!(rows(&out.join("results.csv")).is_empty());
}

#[test]
fn plot_full_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(simulate(&repo_file("configs/default.toml"), &run, &[]).status.success());
    let charts = dir.path().join("charts");
    let o = cetsim(&["plot", "--in", s(&run.join("results.csv")), "--out", s(&charts)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["accuracy_vs_snr_daytime.svg", "accuracy_vs_snr_nighttime.svg"] {
        let svg = std::fs::read_to_string(charts.join(name)).unwrap();
        assert_eq!(svg.matches("class=\"series\"").count(), 7, "{name}");
        for v in ["GFM", "CRM(P+I+C)", "CRM(P+I+M)", "CRM(P+C+M)", "PIM(P+I)", "PIM(P+C)", "PIM(P+M)"] {
            assert!(svg.contains(&format!(">{v}</text>")), "{name} lacks {v}");
        }
    }
    let table = std::fs::read_to_string(charts.join("complexity_table.csv")).unwrap();
    assert_eq!(
        table,
        "variant,mode,flops_g,memory_mb,inference_ms\n\
         PIM(P+I),PIM,4.15e+00,2.40e+01,7.27e+00\n\
         PIM(P+C),PIM,9.45e+00,1.05e+02,3.22e+01\n\
         PIM(P+M),PIM,7.30e+00,1.89e+01,5.51e+00\n\
         CRM(P+I+C),CRM,9.45e+00,1.07e+02,3.11e+01\n\
         CRM(P+I+M),CRM,7.31e+00,2.46e+01,1.33e+01\n\
         CRM(P+C+M),CRM,8.46e+00,1.06e+02,3.42e+01\n\
         GFM,GFM,1.26e+01,1.07e+02,3.82e+01\n"
    );

    let again = dir.path().join("again");
    assert!(cetsim(&["plot", "--in", s(&run.join("results.csv")), "--out", s(&again)]).status.success());
    for name in ["accuracy_vs_snr_daytime.svg", "accuracy_vs_snr_nighttime.svg", "complexity_table.csv"] {
        assert_eq!(std::fs::read(charts.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap());
    }
}

#[test]
fn plot_single_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace(r#"["GFM", "PIM(P+M)"]"#, r#"["CRM(P+C+M)"]"#));
    let run = dir.path().join("run");
    assert!(simulate(&cfg, &run, &[]).status.success());
    let charts = dir.path().join("charts");
    assert!(cetsim(&["plot", "--in", s(&run.join("results.csv")), "--out", s(&charts)]).status.success());
    let svg = std::fs::read_to_string(charts.join("accuracy_vs_snr_daytime.svg")).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 1);
    assert!(!charts.join("accuracy_vs_snr_nighttime.svg").exists());
}

#[test]
fn plot_rejects_wrong_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "r.csv", "mode,variant,accuracy\nGFM,GFM,0.5\n");
    let o = cetsim(&["plot", "--in", s(&p), "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("header"));
}
