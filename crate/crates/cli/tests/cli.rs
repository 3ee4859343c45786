use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn phfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phfit"))
        .args(args)
        .arg("--quiet")
        .env_remove("PHFIT_WORKERS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn data(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(rel)
        .to_str()
        .unwrap()
        .to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let c = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(c).unwrap().parse().unwrap()).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exponential_target_is_recovered_by_one_phase() {
    let dir = tempfile::tempdir().unwrap();
    let target = write(dir.path(), "t.json", r#"{"moments": [1, 2, 6, 24, 120]}"#);
    let out = dir.path().join("out");
    let o = phfit(&[
        "fit",
        "--target",
        &target,
        "--structure",
        "coxian",
        "--n",
        "1",
        "--population",
        "10",
        "--max-epochs",
        "20000",
        "--epsilon",
        "1e-16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mape = column(&fs::read_to_string(out.join("mape.csv")).unwrap(), "mape");
    assert_eq!(mape.len(), 5);
    assert!(mape.iter().all(|&m| m <= 1e-4), "{mape:?}");
    let ph = json(&out.join("ph.json"));
    assert_eq!(ph["n"], 1);
    let report = json(&out.join("result.json"));
    assert_eq!(report["accurate"], true);
    assert!(report.get("kl").is_none());
}

#[test]
fn malformed_target_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let target = write(
        dir.path(),
        "t.json",
        "{\n  \"moments\": [1, 2],\n  \"wieghts\": [1, 1]\n}",
    );
    let o = phfit(&[
        "fit",
        "--target",
        &target,
        "--structure",
        "coxian",
        "--n",
        "2",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("wieghts") && e.contains("line 3"), "{e}");

    let bad_value = write(dir.path(), "v.json", r#"{"moments": [1, -2]}"#);
    let o = phfit(&[
        "fit",
        "--target",
        &bad_value,
        "--structure",
        "coxian",
        "--n",
        "2",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = phfit(&["fit", "--target", &target, "--out", "x", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_target_exits_1_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let target = write(dir.path(), "t.json", r#"{"moments": [1, 3, 6, 24]}"#);
    let out = dir.path().join("out");
    let o = phfit(&[
        "fit",
        "--target",
        &target,
        "--structure",
        "coxian",
        "--n",
        "1",
        "--population",
        "4",
        "--max-epochs",
        "10",
        "--eta",
        "0.01",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(out.join("result.json").exists() && out.join("ph.json").exists());
    assert_eq!(json(&out.join("result.json"))["accurate"], false);
}

#[test]
fn shape_fit_reports_kl_and_degenerates_at_q_zero() {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "--structure",
        "hyper-erlang",
        "--blocks",
        "1,2",
        "--population",
        "20",
        "--max-epochs",
        "600",
    ];
    let run = |cmd: &str, target: &str, extra: &[&str], out: &str| {
        let mut args = vec![cmd, "--target", target, "--out", out];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        phfit(&args)
    };
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let with_points = data("shape/target_cdf20.json");
    let moments_only = data("shape/target_moments.json");

    let o = run("shape-fit", &with_points, &["--Q", "0"], &p("q0"));
    assert!(o.status.code().unwrap() <= 1, "{}", stderr(&o));
    let o = run("fit", &moments_only, &[], &p("plain"));
    assert!(o.status.code().unwrap() <= 1, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(dir.path().join("q0/ph.json")).unwrap(),
        fs::read_to_string(dir.path().join("plain/ph.json")).unwrap()
    );

    let reference = data("shape/reference.json");
    let o = run("shape-fit", &with_points, &["--reference", &reference], &p("kl"));
    assert!(o.status.code().unwrap() <= 1, "{}", stderr(&o));
    let kl = json(&dir.path().join("kl/result.json"))["kl"].as_f64().unwrap();
    assert!(kl.is_finite() && kl >= 0.0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("kl="));
}

#[test]
fn sample_is_reproducible_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "s.json",
        r#"{"family": "general", "count": 10, "seed": 1, "size_range": [1, 12]}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = phfit(&["sample", "--spec", &spec, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(a.join("instances"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.push(a.join("manifest.json"));
    files.push(a.join("moments.csv"));
    assert_eq!(files.len(), 12);
    for f in &files {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(
            fs::read(f).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
    let moments = fs::read_to_string(a.join("moments.csv")).unwrap();
    assert_eq!(moments.lines().next().unwrap().split(',').count(), 21);
    for f in fs::read_dir(a.join("instances")).unwrap() {
        let n = json(&f.unwrap().path())["ph"]["n"].as_u64().unwrap();
        assert!((1..=12).contains(&n));
    }
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["spec"]["family"], "general");

    let bad = write(dir.path(), "bad.json", r#"{"family": "general", "count": 0}"#);
    assert_eq!(
        phfit(&[
            "sample",
            "--spec",
            &bad,
            "--out",
            dir.path().join("c").to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn eval_reports_rates_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "s.json",
        r#"{"family": "hyper-erlang", "count": 3, "seed": 4, "size_range": [1, 1]}"#,
    );
    let set = dir.path().join("set");
    assert_eq!(
        phfit(&["sample", "--spec", &spec, "--out", set.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let grid = write(
        dir.path(),
        "g.json",
        r#"[{"structure": "coxian", "n": 1, "l": [2, 3]}]"#,
    );
    let out = dir.path().join("eval");
    let o = phfit(&[
        "eval",
        "--testset",
        set.to_str().unwrap(),
        "--grid",
        &grid,
        "--population",
        "10",
        "--max-epochs",
        "20000",
        "--epsilon",
        "1e-16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count() - 1, 3 * 2);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for eta in ["0.2", "0.5", "1"] {
        assert_eq!(column(&summary, &format!("success_eta_{eta}")), vec![100.0, 100.0]);
    }
}

#[test]
fn queue_tables_for_mm1_and_unstable_input() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.json", r#"{"n": 1, "alpha": [1.0], "T": [[-0.7]]}"#);
    let s = write(dir.path(), "s.json", r#"{"n": 1, "alpha": [1.0], "T": [[-1.0]]}"#);
    let out = dir.path().join("q");
    let o = phfit(&[
        "queue",
        "--arrival",
        &a,
        "--service",
        &s,
        "--l",
        "2,3,4,5",
        "--k-max",
        "30",
        "--structure",
        "coxian",
        "--n",
        "1",
        "--population",
        "10",
        "--max-epochs",
        "3000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pmf = fs::read_to_string(out.join("pmf.csv")).unwrap();
    assert_eq!(
        pmf.lines().next().unwrap(),
        "k,p_true,p_hat_l2,p_hat_l3,p_hat_l4,p_hat_l5"
    );
    for (k, p) in column(&pmf, "p_true").iter().enumerate() {
        assert!((p - 0.3 * 0.7f64.powi(k as i32)).abs() < 1e-8);
    }
    let acc = fs::read_to_string(out.join("accumulated.csv")).unwrap();
    assert_eq!(acc.lines().next().unwrap(), "j,accerr_l2,accerr_l3,accerr_l4,accerr_l5");

    let fast = write(dir.path(), "f.json", r#"{"n": 1, "alpha": [1.0], "T": [[-1.05]]}"#);
    let o = phfit(&[
        "queue",
        "--arrival",
        &fast,
        "--service",
        &s,
        "--structure",
        "coxian",
        "--n",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("utilization"), "{}", stderr(&o));
}
