use std::path::Path;
use std::process::{Command, Output};

fn harmonize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmonize")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// `(key columns, value)` rows of a table CSV, header dropped.
fn rows(path: &Path) -> Vec<(String, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.rsplit_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn version_and_exit_codes() {
    let out = harmonize(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("harmonize "));
    assert_eq!(harmonize(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(harmonize(&["ipf2", "--rows", "a.csv"]).status.code(), Some(2));
    assert_eq!(harmonize(&["validate", "--sim", "a", "--ref", "b", "--window", "2005:2001", "--out", "o"]).status.code(), Some(2));
    let out = harmonize(&["farr", "--events", "/nonexistent/x.csv", "--population", "p", "--leavers", "q", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    assert!(out.stdout.is_empty(), "data never goes to stdout");
}

#[test]
fn ipf2_and_ipf3_fit_margins() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = write(d, "a.csv", "i,value\n0,3\n1,7\n");
    let b = write(d, "b.csv", "i,value\n0,4\n1,6\n");
    let init = write(d, "m0.csv", "i,j,value\n0,0,1\n1,0,1\n1,1,1\n");
    let out = d.join("m.csv");
    let st = harmonize(&["ipf2", "--rows", arg(&a), "--cols", arg(&b), "--init", arg(&init), "--out", arg(&out)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let m: Vec<f64> = rows(&out).into_iter().map(|r| r.1).collect();
    // the structural zero at (0,1) forces m = [[3,0],[1,6]]
    assert_eq!(m.len(), 4);
    assert_eq!(m[1], 0.0);
    assert!((m[0] + m[1] - 3.0).abs() < 1e-9 && (m[2] + m[3] - 7.0).abs() < 1e-9);
    assert!((m[0] + m[2] - 4.0).abs() < 1e-9 && (m[1] + m[3] - 6.0).abs() < 1e-9);

    let ab = write(d, "ab.csv", "i,j,value\n0,0,2\n0,1,2\n1,0,2\n1,1,2\n");
    let bc = write(d, "bc.csv", "j,k,value\n0,0,2\n0,1,2\n1,0,2\n1,1,2\n");
    let ac = write(d, "ac.csv", "i,k,value\n0,0,3\n0,1,1\n1,0,1\n1,1,3\n");
    let t = d.join("t.csv");
    let st = harmonize(&["ipf3", "--ab", arg(&ab), "--bc", arg(&bc), "--ac", arg(&ac), "--out", arg(&t)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let cells = rows(&t);
    assert_eq!(cells.len(), 8);
    assert!((cells.iter().map(|c| c.1).sum::<f64>() - 8.0).abs() < 1e-4);
}

#[test]
fn disaggregate_farr_balance_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = write(d, "src.csv", "year,region,sex,age,value\n2000,AT-1,m,-,10\n2000,AT-1,f,-,5\n");
    let dist = write(
        d,
        "dist.csv",
        "year,region,sex,age,value\n2000,10101,m,-,1\n2000,10102,m,-,3\n2000,10101,f,-,2\n2000,10102,f,-,2\n",
    );
    let out = d.join("fine.csv");
    let st = harmonize(&[
        "disaggregate", "--source", arg(&src), "--distribution", arg(&dist), "--key", "year,sex", "--method", "hh", "--out",
        arg(&out),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let fine = rows(&out);
    assert_eq!(fine.iter().map(|r| r.1).sum::<f64>(), 15.0);
    assert!(fine.iter().all(|r| r.1.fract() == 0.0));
    // quota 2.5 is above the divisor threshold sqrt(2*3)
    assert!(fine.contains(&("2000,10101,m,-".to_string(), 3.0)), "{fine:?}");

    let p = write(d, "p.csv", "year,region,sex,age,value\n2000,AT,m,-,100\n2001,AT,m,-,105\n2000,AT,f,-,50\n2001,AT,f,-,50\n");
    let b = write(d, "b.csv", "year,region,sex,age,value\n2000,AT,m,-,10\n2000,AT,f,-,4\n");
    let x = write(d, "x.csv", "year,region,sex,age,value\n2000,AT,m,-,7\n2000,AT,f,-,2\n");
    let e = write(d, "e.csv", "year,region,sex,age,value\n2000,AT,m,-,3\n2000,AT,f,-,1\n");
    let imm = d.join("imm.csv");
    let st = harmonize(&[
        "balance", "residual-immigrants", "--population", arg(&p), "--births", arg(&b), "--deaths", arg(&x), "--emigrants",
        arg(&e), "--out", arg(&imm),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    // the female residual of -1 is floored; zero cells are not written
    assert_eq!(rows(&imm), vec![("2000,AT,m,-".to_string(), 5.0)]);

    let q = write(d, "q.csv", "year,region,sex,age,value\n2000,AT,m,-,10\n2000,AT,f,-,3\n");
    let probs = d.join("probs.csv");
    let st = harmonize(&[
        "farr", "--events", arg(&x), "--population", arg(&p), "--leavers", arg(&q), "--last-year", "2000", "--out",
        arg(&probs),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let pr = rows(&probs);
    // 7 / (102.5 + 5)
    assert!((pr[0].1 - 7.0 / 107.5).abs() < 1e-15, "{pr:?}");

    let sim = write(d, "sim.csv", "year,region,sex,age,value\n2000,AT,m,-,101\n2001,AT,m,-,100\n2000,AT,f,-,50\n2001,AT,f,-,50\n");
    let dev = d.join("dev.csv");
    let st = harmonize(&[
        "validate", "--sim", arg(&sim), "--ref", arg(&p), "--groups", "sex", "--window", "2000:2001", "--out", arg(&dev),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let text = std::fs::read_to_string(&dev).unwrap();
    assert!(text.starts_with("region,sex,age,e_min_pct,e_max_pct,e_min,e_max\n"), "{text}");
    assert!(text.contains("AT,m,-,-4.76,1.00,"), "{text}");
}

#[test]
fn lifetable_columns() {
    let dir = tempfile::tempdir().unwrap();
    let q = write(dir.path(), "q.csv", "age,q\n0,0.1\n1,0.1\n");
    let out = dir.path().join("lt.csv");
    let st = harmonize(&["lifetable", "--q", arg(&q), "--alpha0", "0.5", "--out", arg(&out)]);
    assert!(st.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("age,q,l,d,L,T,e"));
    let e0: f64 = lines.next().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((e0 - 9.5).abs() < 1e-12);
}

#[test]
fn fit_births_writes_rates_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut pop = String::from("year,region,sex,age,value\n");
    for a in 0..100 {
        pop.push_str(&format!("2020,AT-1,f,{a},1000\n"));
    }
    pop.push_str("2020,AT-1,f,100+,50\n");
    let pop = write(d, "pop.csv", &pop);
    let targets = write(d, "t.csv", "year,region,births,mac\n2020,AT-1,1500,30.5\n");
    let out = d.join("rates.csv");
    let st = harmonize(&["fit-births", "--targets", arg(&targets), "--population", arg(&pop), "--out", arg(&out)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let births: f64 = rows(&out).iter().map(|r| r.1 * 1000.0).sum();
    assert!((births - 1500.0).abs() / 1500.0 < 1e-3, "{births}");
    let report = std::fs::read_to_string(d.join("rates.report.csv")).unwrap();
    assert!(report.starts_with("year,region,theta1,theta2,theta3,objective,evals,births,mac\n2020,AT-1,"));
}

#[test]
fn synth_then_pipeline_with_selected_stages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = write(d, "spec.cfg", "first_year = 2000\nlast_year = 2006\nbase_population = 300\n");
    let data = d.join("data");
    let st = harmonize(&["synth", "--spec", arg(&spec), "--out-dir", arg(&data)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let cfg = std::fs::read_to_string(data.join("pipeline.cfg")).unwrap();
    std::fs::write(data.join("pipeline.cfg"), format!("{cfg}stages = population, emigrants\n")).unwrap();
    let config = data.join("pipeline.cfg");
    let st = harmonize(&["--threads", "1", "pipeline", "--config", arg(&config)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let manifest = std::fs::read_to_string(data.join("work/manifest.csv")).unwrap();
    assert!(manifest.starts_with("stage,role,path,sha256\n"));
    assert!(manifest.lines().any(|l| l.starts_with("emigrants,output,") && l.contains("E_hat.csv")));
    assert!(!manifest.contains("deaths,"));
    let st = harmonize(&["pipeline", "--config", arg(&config)]);
    assert!(String::from_utf8_lossy(&st.stderr).matches("unchanged").count() >= 2);

    // a stage whose inputs nobody produces fails before running
    std::fs::write(data.join("pipeline.cfg"), format!("{cfg}stages = simulate\n")).unwrap();
    std::fs::remove_dir_all(data.join("work")).unwrap();
    let st = harmonize(&["pipeline", "--config", arg(&config)]);
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("needs"));
}

#[test]
fn simulate_writes_runs_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "p.csv", "year,region,sex,age,value\n2000,10101,m,30,200\n2000,30101,f,70,100\n");
    let mut dp = String::from("year,region,sex,age,value\n");
    for y in 2000..2003 {
        for r in ["AT-1", "AT-3"] {
            for s in ["m", "f"] {
                for a in 0..100 {
                    dp.push_str(&format!("{y},{r},{s},{a},0.05\n"));
                }
                dp.push_str(&format!("{y},{r},{s},100+,0.05\n"));
            }
        }
    }
    write(d, "dp.csv", &dp);
    let cfg = write(d, "scenario.cfg", "t0 = 2000\nte = 2003\nruns = 2\nseed = 4\npopulation = p.csv\ndeaths = dp.csv\n");
    let out = d.join("results");
    let st = harmonize(&["simulate", "--config", arg(&cfg), "--out-dir", arg(&out)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["run_000.csv", "run_001.csv", "run_000.D.csv", "mean.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let start: f64 = rows(&out.join("run_000.csv")).iter().filter(|r| r.0.starts_with("2000,")).map(|r| r.1).sum();
    assert_eq!(start, 300.0);
    let st = harmonize(&["simulate", "--config", arg(&d.join("missing.cfg")), "--out-dir", arg(&out)]);
    assert_eq!(st.status.code(), Some(1));
}
