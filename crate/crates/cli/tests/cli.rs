use std::path::Path;
use std::process::{Command, Output};

use lumenforge::optics::ScenarioKind;
use lumenforge_cli::cli::{parse_target, report_path};
use lumenforge_cli::sweep::{read_sweep_csv, write_sweep_csv, SweepPlan, SweepRow};

fn lumenforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumenforge")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUICK: [&str; 6] = ["--max-iter", "3", "--refine-iter", "2", "--ray-grid", "8"];

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&lumenforge(&[])), 1);
    assert_eq!(code(&lumenforge(&["bogus"])), 1);
    assert_eq!(code(&lumenforge(&["gen-db", "--scenario", "lens_rect", "--random", "1"])), 1, "missing --out");
    assert_eq!(code(&lumenforge(&["--help"])), 0);
}

#[test]
fn missing_model_is_an_io_error() {
    let o = lumenforge(&["infer", "--model", "/nonexistent/model.json", "--target", "w=3000,h=3000,d=1200"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn empty_database_paths() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("empty.jsonl");
    let o = lumenforge(&["gen-db", "--scenario", "lens_rect", "--random", "0", "--out", p(&db)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&db).unwrap().len(), 0);

    let model = dir.path().join("m.json");
    let o = lumenforge(&["train", "--db", p(&db), "--out", p(&model)]);
    assert_ne!(code(&o), 0);
    assert!(!model.exists());
}

#[test]
fn pipeline_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        let db = dir.path().join(format!("db{threads}.jsonl"));
        let model = dir.path().join(format!("m{threads}.json"));
        let csv = dir.path().join(format!("e{threads}.csv"));
        let mut args = vec!["--threads", threads, "--seed", "3", "--rays", "20000", "gen-db", "--scenario", "reflector_offset"];
        args.extend(["--random", "4", "--out", p(&db)]);
        args.extend(QUICK);
        assert_eq!(code(&lumenforge(&args)), 0);
        let o = lumenforge(&["--threads", threads, "train", "--db", p(&db), "--epochs", "3", "--out", p(&model)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = lumenforge(&["--threads", threads, "--rays", "20000", "eval", "--model", p(&model), "--db", p(&db), "--out", p(&csv)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        [db, model, csv].map(|f| std::fs::read(f).unwrap())
    };
    let one = run("1");
    assert_eq!(one, run("3"));
    assert_eq!(one[0].iter().filter(|b| **b == b'\n').count(), 4);
    assert!(report_path(&dir.path().join("m1.json")).exists());
}

#[test]
fn gen_db_resumes_without_refitting() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db.jsonl");
    let base = ["--rays", "20000", "gen-db", "--scenario", "reflector_offset", "--out", p(&db)];
    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--random", "3"]);
    args.extend(QUICK);
    assert_eq!(code(&lumenforge(&args)), 0);
    let full = std::fs::read_to_string(&db).unwrap();
    let first: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::write(&db, &first).unwrap();
    args.push("--resume");
    assert_eq!(code(&lumenforge(&args)), 0);
    assert_eq!(std::fs::read_to_string(&db).unwrap(), full);
}

#[test]
fn infer_writes_surface_json() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db.jsonl");
    let model = dir.path().join("m.json");
    let mut args = vec!["--rays", "20000", "gen-db", "--scenario", "lens_rect", "--random", "3", "--out", p(&db)];
    args.extend(QUICK);
    assert_eq!(code(&lumenforge(&args)), 0);
    assert_eq!(code(&lumenforge(&["train", "--db", p(&db), "--epochs", "2", "--out", p(&model)])), 0);
    let o = lumenforge(&["infer", "--model", p(&model), "--target", "w=3000,h=2500,d=1200"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["coeffs"].as_array().unwrap().len(), 36);

    let csv = dir.path().join("irr.csv");
    let o = lumenforge(&["--rays", "20000", "infer", "--model", p(&model), "--target", "w=3000,h=2500,d=1200", "--csv", p(&csv)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# extent_mm="));
    assert_eq!(text.lines().count(), 42);

    let o = lumenforge(&["infer", "--model", p(&model), "--target", "x=1,y=2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn target_and_sweep_parsing() {
    let t = parse_target(ScenarioKind::LensRect, "d=1200, w=3000,h=2500").unwrap();
    assert_eq!(t.params(), vec![3000.0, 2500.0, 1200.0]);
    assert!(parse_target(ScenarioKind::LensRect, "w=3000,h=2500").is_err());
    assert!(parse_target(ScenarioKind::ReflectorOffset, "x=nan,y=0").is_err());

    let plan = SweepPlan::parse(ScenarioKind::LensRect, "w=1000:8000:8,h=1000:8000:8,d=1200").unwrap();
    let targets = plan.targets().unwrap();
    assert_eq!(targets.len(), 64);
    assert_eq!(targets[1].params(), vec![2000.0, 1000.0, 1200.0]);
    assert_eq!(targets[63].params(), vec![8000.0, 8000.0, 1200.0]);
    assert!(SweepPlan::parse(ScenarioKind::LensRect, "w=1:2:3,h=1").is_err());
    assert!(SweepPlan::parse(ScenarioKind::LensRect, "w=5:2:3,h=1,d=1").is_err());
}

#[test]
fn sweep_csv_round_trip() {
    let rows = vec![
        SweepRow { index: 0, params: vec![0.1, 2.5], nonuniformity_pct: Some(4.25), spill: Some(0.01), extrapolated: false, error: None },
        SweepRow {
            index: 1,
            params: vec![600.0, 0.0],
            nonuniformity_pct: None,
            spill: None,
            extrapolated: true,
            error: Some("radius 1e-3, not positive".into()),
        },
    ];
    let mut buf = Vec::new();
    write_sweep_csv(ScenarioKind::ReflectorOffset, &rows, &mut buf).unwrap();
    let (kind, back) = read_sweep_csv(&buf[..]).unwrap();
    assert_eq!(kind, ScenarioKind::ReflectorOffset);
    assert_eq!(back, rows);
}
