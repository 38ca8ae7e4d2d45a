use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn vadam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vadam"))
        .args(args)
        .env_remove("VADAM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vadam(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn fit_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["fit", "--out", s(dir), "--set", "optimizer.method=adam", "--set", "train.iterations=10"]);
    }
    for f in ["trace.csv", "posterior.json", "effective_config.toml"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn unknown_optimizer_lists_valid_names() {
    let tmp = TempDir::new().unwrap();
    let out = vadam(&["fit", "--out", s(tmp.path()), "--set", "optimizer.method=adamw"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["adam", "vadam", "vogn", "vadagrad", "bbvi"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn unknown_keys_and_bad_arguments_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = vadam(&["fit", "--out", s(tmp.path()), "--set", "train.iteratons=5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.iteratons"));
    assert_eq!(vadam(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(vadam(&["--help"]).status.code(), Some(0));
    let missing = vadam(&["fit", "--out", s(tmp.path()), "--set", "data.manifest=no/such/file.json"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn vadam_on_toy_mixture_with_weak_prior_completes() {
    let tmp = TempDir::new().unwrap();
    ok(&[
        "fit",
        "--out",
        s(tmp.path()),
        "--set",
        "optimizer.lambda=0.01",
        "--set",
        "optimizer.mc_samples=1",
        "--set",
        "train.iterations=600",
    ]);
    let (header, rows) = csv_rows(&tmp.path().join("trace.csv"));
    assert_eq!(header, ["iteration", "epoch", "neg_elbo", "log_loss", "rmse", "test_log_likelihood", "sym_kl"]);
    let iters: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(iters.first(), Some(&0));
    assert_eq!(iters.last(), Some(&600));
    assert!(iters.windows(2).all(|w| w[0] < w[1]));
    for r in &rows {
        for v in &r[1..6] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
        assert!(r[6].is_empty());
    }
    let post: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("posterior.json"))).unwrap();
    assert_eq!(post["method"], "vadam");
    assert_eq!(post["posterior"]["mu"].as_array().unwrap().len(), 2);
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 4\n[data]\nsynthetic = \"logistic\"\nn = 40\ndim = 3\ntrain_fraction = 0.75\n\
         [optimizer]\nmethod = \"vogn\"\nalpha = 0.05\n[train]\niterations = 30\nreference = \"mf-exact\"\n",
    )
    .unwrap();
    ok(&["fit", "--config", s(&cfg), "--out", s(&a), "--set", "optimizer.beta=0.05"]);
    let effective = a.join("effective_config.toml");
    ok(&["fit", "--config", s(&effective), "--out", s(&b)]);
    for f in ["trace.csv", "posterior.json", "effective_config.toml"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let text = read(&effective);
    assert!(text.contains("beta = 0.05") && text.contains("n = 30"), "{text}");
    let (_, rows) = csv_rows(&a.join("trace.csv"));
    assert!(rows.iter().all(|r| r[6].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let target = tmp.path().join("env-out");
    let out = Command::new(env!("CARGO_BIN_EXE_vadam"))
        .args(["fit", "--set", "train.iterations=3"])
        .env("VADAM_OUTPUT_DIR", &target)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("trace.csv").exists());
}

#[test]
fn dataset_manifest_with_split() {
    let tmp = TempDir::new().unwrap();
    let mut lines = String::new();
    for i in 0..30 {
        let x = i as f64 / 10.0 - 1.5;
        let y = if (i * 7) % 3 == 0 { -1 } else { 1 };
        lines.push_str(&format!("{y} 1:{x} 2:{}\n", 0.5 - x * 0.3));
    }
    std::fs::write(tmp.path().join("toy.libsvm"), lines).unwrap();
    std::fs::write(
        tmp.path().join("toy.json"),
        r#"{"path": "toy.libsvm", "format": "libsvm", "split": {"train_fraction": 0.8, "seed": 3, "standardize": true}}"#,
    )
    .unwrap();
    std::fs::write(tmp.path().join("run.toml"), "[data]\nmanifest = \"toy.json\"\n[train]\niterations = 20\n").unwrap();
    ok(&["fit", "--config", s(&tmp.path().join("run.toml")), "--out", s(&tmp.path().join("o"))]);
    let text = read(&tmp.path().join("o/effective_config.toml"));
    assert!(text.contains("n = 24"), "{text}");
}

#[test]
fn numerical_failure_names_the_iteration() {
    let tmp = TempDir::new().unwrap();
    let out = vadam(&[
        "fit",
        "--out",
        s(tmp.path()),
        "--set",
        "optimizer.method=adam",
        "--set",
        "optimizer.alpha=1e308",
        "--set",
        "train.iterations=20",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration "));
}

#[test]
fn von_with_exact_hessian_rejects_networks() {
    let tmp = TempDir::new().unwrap();
    let out = vadam(&[
        "fit",
        "--out",
        s(tmp.path()),
        "--set",
        "data.synthetic=nonlinear",
        "--set",
        "model.kind=mlp-regression",
        "--set",
        "model.hidden=4",
        "--set",
        "model.noise_precision=1.0",
        "--set",
        "optimizer.method=von",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn comparison_rows_cover_the_grid() {
    let tmp = TempDir::new().unwrap();
    ok(&[
        "compare-logreg",
        "--out",
        s(tmp.path()),
        "--set",
        r#"compare.methods=["vadam", "vogn", "vadam"]"#,
        "--set",
        "compare.minibatch=[1, 8, 16, 32, 64]",
        "--set",
        "compare.seeds=2",
        "--set",
        "compare.iterations=200",
        "--set",
        "compare.eval_samples=50",
    ]);
    let (header, rows) = csv_rows(&tmp.path().join("comparison.csv"));
    assert_eq!(header, ["method", "minibatch", "effective_minibatch", "seed", "sym_kl", "neg_elbo", "log_loss"]);
    assert_eq!(rows.len(), 3 * 5 * 2);
    let block = 5 * 2;
    assert_eq!(rows[..block], rows[2 * block..]);
    let m1 = |method: &str| rows.iter().find(|r| r[0] == method && r[1] == "1" && r[3] == "0").unwrap().clone();
    assert_ne!(m1("vadam")[4], m1("vogn")[4]);
    assert!(rows.iter().filter(|r| r[1] == "64").all(|r| r[2] == "60"));
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn theorem1_table_endpoints() {
    let out = ok(&["theorem1", "--n", "10", "--repeats", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 20);
    for row in &rows {
        let w: f64 = row[3].parse().unwrap();
        match &row[2] {
            "1" => assert_eq!(w, 1.0),
            "10" => assert_eq!(w, 0.0),
            _ => assert!(w > 0.0 && w < 1.0),
        }
        assert!(row[4].parse::<f64>().unwrap() <= 1e-9);
    }
    assert_eq!(vadam(&["theorem1", "--n", "20"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(",pass")).count(), 4, "{text}");
    let bad = vadam(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!String::from_utf8(bad.stdout).unwrap().contains(",pass"));
}

#[test]
fn varopt_writes_four_reproducible_trajectories() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["varopt", "--out", s(dir), "--set", "steps=200", "--set", "gd=true"]);
    }
    for k in 1..=4 {
        for tag in ["vadagrad", "gd"] {
            let f = format!("{tag}_{k}.csv");
            assert_eq!(read(&a.join(&f)), read(&b.join(&f)), "{f}");
            let (header, rows) = csv_rows(&a.join(&f));
            assert_eq!(header, ["step", "mu_1", "mu_2", "sigma2_1", "sigma2_2", "objective"]);
            assert_eq!(rows.len(), 201);
        }
    }
    assert!(!a.join("vadagrad_5.csv").exists());
    ok(&["varopt", "--out", s(&tmp.path().join("c")), "--set", "method=vadam-annealed", "--set", "steps=50"]);
    assert!(tmp.path().join("c/vadam-annealed_4.csv").exists());
}
