use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mstm(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mstm"));
    cmd.args(args).env_remove("MSTM_OUTPUT_DIR");
    if let Some(d) = out_dir {
        cmd.env("MSTM_OUTPUT_DIR", d);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A 3×3 lattice, two variables, three times; cell (2, 2, r1c1) unobserved.
fn fixture(dir: &Path, seed: u64, iterations: usize) -> PathBuf {
    let mut edges = String::new();
    for r in 0..3 {
        for c in 0..3 {
            if c + 1 < 3 {
                edges += &format!("r{r}c{c} r{r}c{}\n", c + 1);
            }
            if r + 1 < 3 {
                edges += &format!("r{r}c{c} r{}c{c}\n", r + 1);
            }
        }
    }
    write(dir, "edges.txt", &edges);
    let mut obs = String::from("variable,time,unit,value,variance\n");
    for l in 1..=2 {
        for t in 1..=3 {
            for r in 0..3 {
                for c in 0..3 {
                    if (l, t, r, c) == (2, 2, 1, 1) {
                        continue;
                    }
                    let v = 2.0 + 0.5 * l as f64 + 0.1 * (r * 3 + c) as f64 - 0.05 * t as f64;
                    obs += &format!("{l},{t},r{r}c{c},{v},0.25\n");
                }
            }
        }
    }
    write(dir, "obs.csv", &obs);
    write(
        dir,
        "run.toml",
        &format!(
            r#"[data]
edges = "edges.txt"
observations = "obs.csv"

[model]
rank = 3
covariates = {{ variable_indicators = true }}

[mcmc]
iterations = {iterations}
burn_in = 50
chains = 2
seed = {seed}

[output]
dir = "out"

[[contrast]]
name = "variable gap"
weights = [
  {{ variable = 2, time = 1, unit = "r0c0", weight = 1.0 }},
  {{ variable = 1, time = 1, unit = "r0c0", weight = -1.0 }},
]
"#
        ),
    )
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_input_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 1, 200);
    std::fs::remove_file(dir.path().join("obs.csv")).unwrap();
    let out = mstm(&["fit", cfg.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["path"].as_str().unwrap().ends_with("obs.csv"));

    let out = mstm(&["fit", dir.path().join("nope.toml").to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["path"].as_str().unwrap().ends_with("nope.toml"));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[data]\nedges = 1\n");
    let out = mstm(&["fit", cfg.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn fit_predict_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 7, 250);
    let out = mstm(&["fit", cfg.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit_dir = dir.path().join("out");

    let meta = json(&fit_dir.join("run_metadata.json"));
    assert_eq!(meta["format_version"], 1);
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["defaults"]["iterations"], 10000);
    assert_eq!(meta["defaults"]["burn_in"], 1000);
    assert_eq!(meta["defaults"]["chains"], 3);
    let deviations: Vec<String> = serde_json::from_value(meta["deviations"].clone()).unwrap();
    assert!(deviations.iter().any(|d| d.contains("first time point")));
    assert!(deviations.iter().any(|d| d.contains("smoother")));
    assert_eq!(meta["lifted"].as_array().unwrap().len(), 2);
    assert_eq!(meta["eigenvalue_floors"].as_array().unwrap().len(), 3);

    let chain = std::fs::read_to_string(fit_dir.join("draws/chain0.csv")).unwrap();
    assert_eq!(chain.lines().count() - 1, 200);
    assert!(chain.lines().nth(1).unwrap().starts_with("51,"));
    assert!(fit_dir.join("draws/chain1_eta.bin").exists());
    assert!(fit_dir.join("diagnostics.json").exists());

    let out = mstm(&["predict", fit_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(fit_dir.join("predictions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "variable,time,unit,post_mean,root_mspe,mu_mean");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 2 * 3 * 9);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() >= 0.0);
    }
    let contrasts = json(&fit_dir.join("contrasts.json"));
    let gap = contrasts["variable gap"]["mean"].as_f64().unwrap();
    assert!((gap - 0.5).abs() < 0.5, "{gap}");

    let out = mstm(&["diagnostics", fit_dir.to_str().unwrap()], None);
    assert!(out.status.success());
    let diag: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(diag.as_array().unwrap().iter().any(|p| p["name"] == "sigma_k2"));
}

#[test]
fn predict_rejects_other_format_versions_and_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 3, 120);
    assert!(mstm(&["fit", cfg.to_str().unwrap()], None).status.success());
    let fit_dir = dir.path().join("out");
    let meta_path = fit_dir.join("run_metadata.json");
    let original = std::fs::read_to_string(&meta_path).unwrap();

    std::fs::write(&meta_path, original.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    let out = mstm(&["predict", fit_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format version"));

    std::fs::write(&meta_path, original).unwrap();
    let obs = dir.path().join("obs.csv");
    let text = std::fs::read_to_string(&obs).unwrap();
    std::fs::write(&obs, text.replacen(",0.25\n", ",0.5\n", 1)).unwrap();
    let out = mstm(&["predict", fit_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed since the fit"));
}

#[test]
fn output_dir_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 3, 100);
    let elsewhere = dir.path().join("elsewhere");
    assert!(mstm(&["fit", cfg.to_str().unwrap()], Some(&elsewhere)).status.success());
    assert!(elsewhere.join("run_metadata.json").exists());
    assert!(!dir.path().join("out").exists());
}

const STUDY: &str = r#"
[study]
replicates = 2
observed_fraction = 0.65
perturbation_variance = "auto"
seed = 5

[graph]
lattice = [4, 4]

[support]
variables = 2
times = 3

[model]
rank = 4
covariates = { variable_indicators = true }

[generative]
beta = [3.0, 0.5]
signal_variance = 0.4
sigma_xi2 = 0.4
measurement_variance = 0.2

[mcmc]
iterations = 300
burn_in = 50
chains = 1

[output]
dir = "study-out"
"#;

#[test]
fn smoke_study() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "study.toml", STUDY);
    let out = mstm(&["study", cfg.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path().join("study-out");
    let report = json(&d.join("study_report.json"));
    assert_eq!(report["replicates"].as_array().unwrap().len(), 2);
    assert_eq!(report["failures"], 0);
    let echoed = json(&d.join("study_config.json"));
    assert_eq!(echoed["study"]["observed_fraction"], 0.65);
    assert_eq!(echoed["study"]["perturbation_variance"], "auto");

    let csv = std::fs::read_to_string(d.join("study_replicates.csv")).unwrap();
    let mut rdr = csv.lines();
    let header: Vec<&str> = rdr.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "mprd_observed").unwrap();
    let mut v: Vec<f64> = rdr.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    v.sort_by(f64::total_cmp);
    let median = (v[0] + v[1]) / 2.0;
    assert_eq!(report["mprd_observed"]["median"].as_f64().unwrap(), median);
}

#[test]
fn simulate_is_reproducible_and_calibrated() {
    let dir = tempfile::tempdir().unwrap();
    let text = STUDY
        .replace("lattice = [4, 4]", "lattice = [10, 10]")
        .replace("times = 3", "times = 25")
        .replace("rank = 4", "rank = 30")
        .replace("signal_variance = 0.4", "signal_variance = 0.1");
    let cfg = write(dir.path(), "sim.toml", &text);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(mstm(&["simulate", cfg.to_str().unwrap()], Some(&a)).status.success());
    assert!(mstm(&["simulate", cfg.to_str().unwrap()], Some(&b)).status.success());
    for f in ["observations.csv", "latent.csv", "support.csv", "edges.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let obs = std::fs::read_to_string(a.join("observations.csv")).unwrap();
    assert_eq!(obs.lines().count() - 1, 2 * 25 * 100);
    assert_eq!(std::fs::read_to_string(a.join("latent.csv")).unwrap().lines().count() - 1, 5000);

    // Total variance around the fixed effects: signal + fine scale + noise.
    let mut resid = Vec::new();
    for line in obs.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let mean = if f[0] == "1" { 3.0 } else { 3.5 };
        resid.push(f[3].parse::<f64>().unwrap() - mean);
    }
    let n = resid.len() as f64;
    let m = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / 0.7 - 1.0).abs() < 0.1, "{var}");
}
