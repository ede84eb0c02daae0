//! End-to-end runs of the `kmc` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("kmc-bin-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self { dir }
    }

    fn config(&self, body: &str) -> PathBuf {
        let path = self.dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn kmc(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kmc"));
    cmd.args(args).env_remove("KMC_THREADS");
    if let Some(n) = threads {
        cmd.env("KMC_THREADS", n);
    }
    cmd.output().unwrap()
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kmc(&args, None)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn malformed_config_exits_2_without_output() {
    let ws = Workspace::new("malformed");
    let out = ws.path("out.csv");
    for body in [r#"{"certify": {"t": 0.1"#, r#"{"certify": {"t": 0.1, "eta": 0.8, "c_ls": 1, "typo": 0}}"#, r#"{"run": {"n_steps": 3}}"#] {
        let o = run("certify", &ws.config(body), &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists());
        assert!(!ws.path("out.manifest.json").exists());
    }
    let o = run("certify", &ws.path("missing.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn certify_example_and_manifest() {
    let ws = Workspace::new("certify");
    let out = ws.path("cert.csv");
    let cfg = ws.config(r#"{"seed": 3, "certify": {"t": 0.1, "eta": 0.8, "l": 1, "c_ls": 1, "a": "rule"}}"#);
    let o = run("certify", &cfg, &out, &["--seed", "9"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("valid: true"));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][h.iter().position(|c| c == "valid").unwrap()], "true");
    assert!(column(&h, &rows, "rho")[0] >= 0.0375);
    assert!(ws.path("cert.txt").exists());
    let m: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("cert.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["seed_overridden"], true);
    assert_eq!(m["experiment"], "certify");
    assert!(m["versions"]["kmc"].is_string());
}

#[test]
fn violated_rate_floor_exits_3() {
    let ws = Workspace::new("floor");
    let out = ws.path("cert.csv");
    let o = run("certify", &ws.config(r#"{"certify": {"t": 0.25, "eta": 0.0, "c_ls": 1}}"#), &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerical assertion"));
}

#[test]
fn verlet_error_sweep() {
    let ws = Workspace::new("verlet");
    let out = ws.path("verlet.csv");
    let cfg = ws.config(
        r#"{"seed": 4, "potential": {"kind": "unit_double_well"}, "chain": {"t": 0.2, "eta": 0.5},
            "verlet_error": {"n_steps": 20, "verlet_counts": [4, 8, 16, 32], "replicas": 200,
                             "init": {"x_mean": [0.0], "x_sd": 1.0, "v_sd": 1.0}}}"#,
    );
    let o = run("verlet_error", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 4);
    let slope = column(&h, &rows, "slope_p2")[0];
    assert!((1.8..=2.2).contains(&slope), "{slope}");
    for r in &column(&h, &rows, "ms_ratio")[1..] {
        assert!((10.0..=24.0).contains(r), "{r}");
    }
}

#[test]
fn verlet_single_step_free_flight_is_exact() {
    let ws = Workspace::new("free");
    let out = ws.path("free.csv");
    let cfg = ws.config(
        r#"{"potential": {"kind": "zero", "dim": 2}, "chain": {"t": 0.3, "eta": 0.2},
            "verlet_error": {"n_steps": 5, "verlet_counts": [1], "replicas": 10,
                             "init": {"x_mean": [0.0, 1.0], "x_sd": 1.0, "v_sd": 1.0}}}"#,
    );
    assert_eq!(run("verlet_error", &cfg, &out, &[]).status.code(), Some(0));
    let (h, rows) = read_csv(&out);
    assert!(column(&h, &rows, "mean_abs_error")[0] < 1e-14);
}

#[test]
fn run_output_is_reproducible_across_thread_counts() {
    let ws = Workspace::new("run");
    let cfg = ws.config(
        r#"{"seed": 12, "potential": {"kind": "mexican_hat", "scale": 0.05}, "chain": {"t": 0.1, "eta": 0.3},
            "run": {"n_steps": 50, "x0": [0.5, 0.0], "v0": [0.0, 1.0]}}"#,
    );
    let a = ws.path("a.csv");
    let b = ws.path("b.csv");
    assert_eq!(kmc(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], Some("1")).status.code(), Some(0));
    assert_eq!(kmc(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "3"], None).status.code(), Some(0));
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let (h, rows) = read_csv(&a);
    assert_eq!(h, ["step", "x0", "x1", "v0", "v1", "U", "x_norm_sq"]);
    assert_eq!(rows.len(), 51);
}

#[test]
fn gaussian_sweep() {
    let ws = Workspace::new("gauss");
    let out = ws.path("g.csv");
    let cfg = ws.config(
        r#"{"gaussian": {"precision": [[1.0, 0.2], [0.2, 0.5]], "mean0": [1, 0, 0, 0.5],
            "cov0": [[1,0,0,0],[0,2,0,0],[0,0,1,0],[0,0,0,1]], "t": [0.05, 0.1, 0.2], "eta": [0.0, 0.5, 0.9], "n_max": 50}}"#,
    );
    let o = run("gaussian", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    assert_eq!(&h[3..], ["k", "kl", "fisher", "mixed_fisher", "modified_entropy", "certified_factor", "observed_ratio"]);
    assert_eq!(rows.len(), 9 * 51);
}

#[test]
fn couple_diagnostics() {
    let ws = Workspace::new("couple");
    let out = ws.path("c.csv");
    let cfg = ws.config(
        r#"{"seed": 1, "potential": {"kind": "unit_double_well"}, "chain": {"t": 0.05, "eta": 0.9},
            "couple": {"x": [-0.5], "v": [0.2], "x_other": [0.4], "v_other": [-0.6], "n": 5, "draws": 20}}"#,
    );
    let o = run("couple", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 20);
    assert!(column(&h, &rows, "merge_error").iter().all(|e| *e <= 1e-7));
    assert!(column(&h, &rows, "jacobian_op_norm").iter().all(|e| *e <= 0.5));
}

#[test]
fn anneal_table() {
    let ws = Workspace::new("anneal");
    let out = ws.path("a.csv");
    let cfg = ws.config(
        r#"{"seed": 2, "potential": {"kind": "double_well", "tilt": 0.3},
            "anneal": {"beta0": 1.0, "c_hat_factor": 2.0, "gamma": 1.0, "q": 0.2, "n_steps": 200, "replicas": 40,
                       "x0": [1.0], "v0": [0.0], "depth_resolution": 0.01}}"#,
    );
    let o = run("anneal", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    assert_eq!(&h[..8], ["n", "beta", "t", "eta", "u_mean", "u_q10", "u_q50", "u_q90"]);
    assert_eq!(h.len(), 11);
    assert!(h[8].starts_with("exceed_"));
    let beta = column(&h, &rows, "beta");
    assert!(beta.windows(2).all(|w| w[1] > w[0]));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("a.manifest.json")).unwrap()).unwrap();
    assert!(m["summary"]["c_star"].as_f64().unwrap() > 0.5);
}

#[test]
fn anneal_rejects_negative_damping() {
    let ws = Workspace::new("anneal-bad");
    let out = ws.path("a.csv");
    let cfg = ws.config(
        r#"{"potential": {"kind": "double_well"},
            "anneal": {"beta0": 1.0, "c_hat": 1.0, "gamma": 100.0, "q": 0.2, "n_steps": 10, "replicas": 2, "x0": [1.0], "v0": [0.0]}}"#,
    );
    assert_eq!(run("anneal", &cfg, &out, &[]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn meanfield_table() {
    let ws = Workspace::new("mf");
    let out = ws.path("m.csv");
    let cfg = ws.config(
        r#"{"seed": 3, "chain": {"t": 0.05, "eta": 0.7},
            "meanfield": {"confinement": {"kind": "diagonal_quadratic", "diagonal": [1.0]},
                          "interaction": {"kind": "diagonal_quadratic", "diagonal": [2.0]},
                          "particle_counts": [4, 8], "reference_particles": 32, "n_steps": 10, "record_at": [5, 10],
                          "k": 1, "replicas": 16, "reference_replicas": 2, "bootstrap": 20,
                          "init": {"x_mean": [0.0], "x_sd": 1.0, "v_sd": 1.0}}}"#,
    );
    let o = run("meanfield", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    assert_eq!(&h[..6], ["N", "n", "k", "w2_estimate", "bootstrap_lo", "bootstrap_hi"]);
    assert_eq!(rows.len(), 4);
    assert!(column(&h, &rows, "w2_estimate").iter().all(|w| *w >= 0.0));
}

#[test]
fn experiment_key_must_match_subcommand() {
    let ws = Workspace::new("kind");
    let out = ws.path("x.csv");
    let cfg = ws.config(r#"{"experiment": "anneal", "certify": {"t": 0.1, "eta": 0.8, "c_ls": 1}}"#);
    assert_eq!(run("certify", &cfg, &out, &[]).status.code(), Some(2));
}
