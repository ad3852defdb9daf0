use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vqround::io::{load_tensor, save_tensor};
use vqround::Tensor2D;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqround"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value(out: &Output, key: &str) -> f64 {
    let text = stdout(out);
    let field = text
        .split_whitespace()
        .find_map(|f| f.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {text:?}"));
    field.parse().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn save(t: &Tensor2D, dir: &Path, name: &str) -> String {
    let path = p(dir, name);
    save_tensor(t, &path).unwrap();
    path
}

/// Deterministic pseudo-random values without an RNG dependency.
fn wave(rows: usize, cols: usize, phase: f32) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |i, j| {
        let x = (i * cols + j) as f32;
        (1.3 * x + phase).sin() + 0.5 * (0.7 * x * x + phase).cos()
    })
    .unwrap()
}

/// Layer and calibration files plus the `init` outputs under `<dir>/l`.
fn initialized(dir: &Path, rows: usize, cols: usize) -> (String, String, String) {
    let w = save(&wave(rows, cols, 0.1), dir, "w.vqt");
    let x = save(&wave(cols, 4 * cols, 2.0), dir, "x.vqt");
    let prefix = p(dir, "l");
    let out = run(&[
        "init",
        "--weights",
        &w,
        "--calib",
        &x,
        "--out-prefix",
        &prefix,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (w, x, prefix)
}

#[test]
fn init_on_grid_aligned_weights_is_exact() {
    let dir = TempDir::new().unwrap();
    let w = Tensor2D::from_fn(4, 8, |i, j| ((i + j) % 8) as f32 - 3.0).unwrap();
    let wp = save(&w, dir.path(), "w.vqt");
    let xp = save(&wave(8, 32, 0.3), dir.path(), "x.vqt");
    let prefix = p(dir.path(), "init");
    let out = run(&[
        "init",
        "--weights",
        &wp,
        "--calib",
        &xp,
        "--out-prefix",
        &prefix,
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(value(&out, "recon_err"), 0.0);
    for suffix in ["_wq", "_b", "_htilde", "_latent"] {
        let t = load_tensor(format!("{prefix}{suffix}.vqt")).unwrap();
        assert_eq!(t.shape(), (4, 8));
    }
    assert_eq!(load_tensor(format!("{prefix}_wq.vqt")).unwrap(), w);
}

#[test]
fn init_error_codes() {
    let dir = TempDir::new().unwrap();
    let wp = save(&wave(4, 8, 0.0), dir.path(), "w.vqt");
    let xp = save(&wave(8, 16, 1.0), dir.path(), "x.vqt");
    let bad_x = save(&wave(6, 16, 1.0), dir.path(), "bad.vqt");
    let prefix = p(dir.path(), "o");
    let missing = p(dir.path(), "missing.vqt");

    let out = run(&[
        "init",
        "--weights",
        &missing,
        "--calib",
        &xp,
        "--out-prefix",
        &prefix,
    ]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
    let out = run(&[
        "init",
        "--weights",
        &wp,
        "--calib",
        &bad_x,
        "--out-prefix",
        &prefix,
    ]);
    assert_eq!(code(&out), 3);
    let out = run(&[
        "init",
        "--weights",
        &wp,
        "--calib",
        &xp,
        "--bits",
        "1",
        "--out-prefix",
        &prefix,
    ]);
    assert_eq!(code(&out), 4);
    let out = run(&["init", "--weights", &wp]);
    assert_eq!(code(&out), 1);
}

#[test]
fn vq_exact_and_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = save(&wave(8, 16, 0.5), dir.path(), "a.vqt");

    let out = run(&[
        "vq",
        "--latent",
        &a,
        "--k",
        "32",
        "--d",
        "4",
        "--out",
        &p(dir.path(), "full"),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(value(&out, "wcss"), 0.0);

    for name in ["one", "two"] {
        let out = run(&[
            "vq",
            "--latent",
            &a,
            "--k",
            "5",
            "--d",
            "4",
            "--seed",
            "7",
            "--out",
            &p(dir.path(), name),
        ]);
        assert_eq!(code(&out), 0);
        assert!(value(&out, "wcss") > 0.0);
    }
    for ext in ["centroids.vqt", "indices.bin"] {
        let one = fs::read(dir.path().join(format!("one.{ext}"))).unwrap();
        let two = fs::read(dir.path().join(format!("two.{ext}"))).unwrap();
        assert_eq!(one, two, "{ext}");
    }

    let out = run(&[
        "vq",
        "--latent",
        &a,
        "--k",
        "4",
        "--d",
        "3",
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(code(&out), 3);
    let out = run(&[
        "vq",
        "--latent",
        &a,
        "--k",
        "33",
        "--d",
        "4",
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(code(&out), 4);
}

fn blockwise(dir: &Path, steps: &str, with_base: bool) -> Output {
    let (w, x, prefix) = initialized(dir, 16, 16);
    let latent = format!("{prefix}_latent.vqt");
    let cb = p(dir, "cb");
    let out = run(&[
        "vq", "--latent", &latent, "--k", "64", "--d", "4", "--out", &cb,
    ]);
    assert_eq!(code(&out), 0);
    let base = format!("{prefix}_b.vqt");
    let trace = p(dir, "trace.csv");
    let out_prefix = p(dir, "opt");
    let mut args = vec![
        "optimize",
        "--mode",
        "blockwise",
        "--weights",
        &w,
        "--calib",
        &x,
        "--codebook",
        &cb,
        "--steps",
        steps,
        "--out",
        &out_prefix,
        "--trace",
        &trace,
    ];
    if with_base {
        args.extend(["--base", base.as_str()]);
    }
    run(&args)
}

#[test]
fn optimize_zero_steps_keeps_codebook() {
    let dir = TempDir::new().unwrap();
    let out = blockwise(dir.path(), "0", true);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for ext in ["centroids.vqt", "indices.bin"] {
        let before = fs::read(dir.path().join(format!("cb.{ext}"))).unwrap();
        let after = fs::read(dir.path().join(format!("opt.{ext}"))).unwrap();
        assert_eq!(before, after, "{ext}");
    }
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn optimize_blockwise_reduces_loss() {
    for with_base in [true, false] {
        let dir = TempDir::new().unwrap();
        let out = blockwise(dir.path(), "200", with_base);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(value(&out, "final_loss") < value(&out, "initial_loss"));
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next().unwrap(), "step,beta,lambda,loss");
        assert_eq!(lines.count(), 200);
    }
}

#[test]
fn optimize_rejects_unknown_mode() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "optimize",
        "--mode",
        "sideways",
        "--out",
        &p(dir.path(), "o"),
    ]);
    assert_eq!(code(&out), 1);
    let out = run(&[
        "optimize",
        "--mode",
        "blockwise",
        "--out",
        &p(dir.path(), "o"),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn optimize_end_to_end() {
    let dir = TempDir::new().unwrap();
    let l0 = save(&wave(16, 8, 0.2).map(|v| v * 0.4), dir.path(), "l0.vqt");
    let l1 = save(&wave(4, 16, 0.9).map(|v| v * 0.3), dir.path(), "l1.vqt");
    let data = save(&wave(32, 8, 1.7), dir.path(), "data.vqt");
    let out_prefix = p(dir.path(), "student");
    let trace = p(dir.path(), "e2e.csv");
    let out = run(&[
        "optimize",
        "--mode",
        "e2e",
        "--layer",
        &l0,
        "--layer",
        &l1,
        "--data",
        &data,
        "--d",
        "4",
        "--steps",
        "40",
        "--out",
        &out_prefix,
        "--trace",
        &trace,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(value(&out, "hard_kl") >= 0.0);
    for i in 0..2 {
        assert!(dir
            .path()
            .join(format!("student_l{i}.centroids.vqt"))
            .exists());
    }
    let trace = fs::read_to_string(&trace).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "step,beta,lambda,loss,kd,regularizer");
    assert_eq!(rows.len(), 41);
    // Warm-up rows carry no regularizer term.
    for row in &rows[1..5] {
        assert!(row.ends_with(",0"), "{row}");
    }

    let bad = save(&wave(4, 9, 0.0), dir.path(), "bad.vqt");
    let out = run(&[
        "optimize",
        "--mode",
        "e2e",
        "--layer",
        &l0,
        "--layer",
        &bad,
        "--data",
        &data,
        "--out",
        &out_prefix,
    ]);
    assert_eq!(code(&out), 3);
}

fn report_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn analyze_identity_passes() {
    let dir = TempDir::new().unwrap();
    let a = save(&wave(8, 8, 0.4).map(|v| 3.0 * v), dir.path(), "a.vqt");
    let reports = dir.path().join("reports");
    let out = run(&[
        "analyze",
        "--latent",
        &a,
        "--approx",
        &format!("same={a}"),
        "--report-dir",
        &reports.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(value(&out, "clip_rate"), 0.0);
    assert_eq!(
        report_files(&reports),
        ["histograms.csv", "spectrum.csv", "theory.csv"]
    );
    let theory = fs::read_to_string(reports.join("theory.csv")).unwrap();
    assert!(theory.starts_with("method,metric,eps,value\n"));
    assert!(theory.contains("same,clip_rate,,0\n"));
}

#[test]
fn analyze_flags_injected_violation() {
    let dir = TempDir::new().unwrap();
    let a_t = wave(8, 8, 0.4);
    let a = save(&a_t, dir.path(), "a.vqt");
    // A rounding matrix far from h(A) although the latent did not move.
    let h = save(
        &a_t.map(|v| if v > 0.0 { 0.0 } else { 1.0 }),
        dir.path(),
        "h.vqt",
    );
    let reports = dir.path().join("reports");
    let out = run(&[
        "analyze",
        "--latent",
        &a,
        "--approx",
        &format!("edit={a}"),
        "--approx-h",
        &format!("edit={h}"),
        "--report-dir",
        &reports.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 5);
    assert_eq!(report_files(&reports).len(), 3);
}

#[test]
fn analyze_budget_comparison() {
    let dir = TempDir::new().unwrap();
    let a = save(&wave(32, 32, 0.8).map(|v| 2.0 * v), dir.path(), "a.vqt");
    let reports: PathBuf = dir.path().join("cmp");
    let out = run(&[
        "analyze",
        "--latent",
        &a,
        "--budget",
        "256",
        "--seed",
        "3",
        "--report-dir",
        &reports.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report_files(&reports).len(), 3);
    let theory = fs::read_to_string(reports.join("theory.csv")).unwrap();
    for method in ["vq", "lowrank", "kronecker"] {
        assert!(theory.contains(&format!("{method},inf_norm,,")), "{method}");
    }
    let spectrum = fs::read_to_string(reports.join("spectrum.csv")).unwrap();
    assert!(spectrum.starts_with("index,latent,vq_error,lowrank_error,kronecker_error\n"));

    let first = fs::read(reports.join("histograms.csv")).unwrap();
    let again = dir.path().join("again");
    run(&[
        "analyze",
        "--latent",
        &a,
        "--budget",
        "256",
        "--seed",
        "3",
        "--report-dir",
        &again.to_string_lossy(),
    ]);
    assert_eq!(first, fs::read(again.join("histograms.csv")).unwrap());

    let out = run(&[
        "analyze",
        "--latent",
        &a,
        "--budget",
        "256",
        "--compare",
        "fourier",
        "--report-dir",
        &reports.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 4);
}
