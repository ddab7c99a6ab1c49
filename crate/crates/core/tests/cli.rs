use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bodylift::fitting::FitReportFile;
use bodylift::mixer::load_checkpoint;
use bodylift::sampling::Dataset;

fn bodylift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bodylift"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bodylift(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    ok(&path, &["model", "--out", "m.json"]);
    (dir, path)
}

const SMALL: &str = "[mixer]\nchannels = 8\nlayers = 1\ntoken_hidden = 8\nchannel_hidden = 8\n[train]\neval_every = 5\neval_limit = 4\n";

fn small_dataset(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(
        dir,
        &[
            "generate", "--model", "m.json", "--count", "40", "--seed", "3", "--out", "d.bin",
        ],
    );
}

#[test]
fn generate_is_reproducible() {
    let (_t, dir) = workspace();
    let out = ok(
        &dir,
        &[
            "generate", "--model", "m.json", "--count", "50", "--seed", "7", "--out", "a.bin",
        ],
    );
    assert!(out.contains("count 50") && out.contains("S=75"));
    ok(
        &dir,
        &[
            "generate", "--model", "m.json", "--count", "50", "--seed", "7", "--out", "b.bin",
        ],
    );
    assert_eq!(
        fs::read(dir.join("a.bin")).unwrap(),
        fs::read(dir.join("b.bin")).unwrap()
    );
    ok(
        &dir,
        &[
            "generate", "--model", "m.json", "--count", "50", "--seed", "8", "--out", "c.bin",
        ],
    );
    assert_ne!(
        fs::read(dir.join("a.bin")).unwrap(),
        fs::read(dir.join("c.bin")).unwrap()
    );
}

#[test]
fn missing_model_is_a_usage_error() {
    let (_t, dir) = workspace();
    let out = bodylift(&dir, &["generate", "--count", "5", "--out", "x.bin"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = bodylift(
        &dir,
        &["generate", "--model", "nope.json", "--out", "x.bin"],
    );
    assert_eq!(code(&out), 1);
    assert!(!dir.join("x.bin").exists());
}

#[test]
fn help_exits_cleanly() {
    let (_t, dir) = workspace();
    let out = bodylift(&dir, &["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("export-obj"));
}

#[test]
fn zero_noise_dataset_has_clean_inputs() {
    let (_t, dir) = workspace();
    ok(
        &dir,
        &[
            "generate", "--model", "m.json", "--count", "30", "--noise", "0", "--out", "d.bin",
            "--text", "d.txt",
        ],
    );
    let d = Dataset::load(&dir.join("d.bin")).unwrap();
    assert_eq!(d.header.config.noise_sigma, 0.0);
    for ex in &d.examples {
        assert_eq!(ex.input.points, ex.clean.points);
    }
    let text = Dataset::read_text(std::io::BufReader::new(
        fs::File::open(dir.join("d.txt")).unwrap(),
    ))
    .unwrap();
    assert_eq!(text, d);
}

#[test]
fn training_logs_are_reproducible() {
    let (_t, dir) = workspace();
    small_dataset(&dir);
    for name in ["a", "b"] {
        let out = ok(
            &dir,
            &[
                "--config",
                "small.toml",
                "train",
                "--model",
                "m.json",
                "--dataset",
                "d.bin",
                "--steps",
                "12",
                "--seed",
                "5",
                "--out",
                &format!("{name}.ckpt"),
            ],
        );
        assert!(out.contains("held-out MPJPE") && out.contains("MPJPE-PA"));
    }
    let (a, b) = (
        fs::read(dir.join("a.csv")).unwrap(),
        fs::read(dir.join("b.csv")).unwrap(),
    );
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.join("a.ckpt")).unwrap(),
        fs::read(dir.join("b.ckpt")).unwrap()
    );
    // steps 0, 5, 10 and the final step
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
}

#[test]
fn flags_override_the_config_file() {
    let (_t, dir) = workspace();
    small_dataset(&dir);
    fs::write(dir.join("c.toml"), format!("{SMALL}steps = 40\nseed = 1\n")).unwrap();
    ok(
        &dir,
        &[
            "--config",
            "c.toml",
            "train",
            "--model",
            "m.json",
            "--dataset",
            "d.bin",
            "--steps",
            "3",
            "--out",
            "x.ckpt",
        ],
    );
    let log = fs::read_to_string(dir.join("x.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("3,"));
    let ckpt = load_checkpoint(&dir.join("x.ckpt")).unwrap();
    assert_eq!((ckpt.seed, ckpt.params.config.channels), (1, 8));
}

#[test]
fn incompatible_token_count_fails_before_training() {
    let (_t, dir) = workspace();
    small_dataset(&dir);
    let out = bodylift(
        &dir,
        &[
            "--config",
            "small.toml",
            "train",
            "--model",
            "m.json",
            "--dataset",
            "d.bin",
            "--tokens",
            "74",
            "--out",
            "x.ckpt",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("S=75"));
    assert!(!dir.join("x.ckpt").exists() && !dir.join("x.csv").exists());
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let (_t, dir) = workspace();
    small_dataset(&dir);
    ok(
        &dir,
        &[
            "--config",
            "small.toml",
            "train",
            "--model",
            "m.json",
            "--dataset",
            "d.bin",
            "--steps",
            "0",
            "--out",
            "z.ckpt",
            "--log",
            "z.log",
        ],
    );
    assert_eq!(load_checkpoint(&dir.join("z.ckpt")).unwrap().step, 0);
    assert_eq!(
        fs::read_to_string(dir.join("z.log"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let out = ok(
        &dir,
        &[
            "evaluate",
            "--model",
            "m.json",
            "--dataset",
            "d.bin",
            "--checkpoint",
            "z.ckpt",
            "--out",
            "e.json",
        ],
    );
    assert!(out.contains("over 4 examples"));
    assert!(fs::read_to_string(dir.join("e.json"))
        .unwrap()
        .contains("mpjpe_pa_mm"));
}

#[test]
fn divergence_exits_with_two() {
    let (_t, dir) = workspace();
    small_dataset(&dir);
    let out = bodylift(
        &dir,
        &[
            "--config",
            "small.toml",
            "train",
            "--model",
            "m.json",
            "--dataset",
            "d.bin",
            "--steps",
            "10",
            "--lr",
            "1e300",
            "--out",
            "x.ckpt",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

fn fit_truth_error(dir: &Path, seed: u64) -> f64 {
    let name = format!("p{seed}.json");
    ok(
        dir,
        &[
            "problem",
            "--model",
            "m.json",
            "--seed",
            &seed.to_string(),
            "--out",
            &name,
        ],
    );
    ok(
        dir,
        &[
            "fit",
            "--model",
            "m.json",
            "--problem",
            &name,
            "--out",
            "r.json",
        ],
    );
    let report: FitReportFile =
        serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report.report.depth_order_error, Some(0.0));
    report.truth.expect("truth block").mpjpe_mm
}

#[test]
fn fit_recovers_synthesized_state() {
    let (_t, dir) = workspace();
    let mut errors: Vec<f64> = (100..109).map(|s| fit_truth_error(&dir, s)).collect();
    errors.sort_by(f64::total_cmp);
    eprintln!("MPJPE to truth (mm): {errors:.2?}");
    assert!(errors[4] < 5.0);
    assert!(fit_truth_error(&dir, 101) < 5.0);
}

#[test]
fn fit_without_constraints_reports_no_ordinal_term() {
    let (_t, dir) = workspace();
    ok(
        &dir,
        &[
            "problem",
            "--model",
            "m.json",
            "--constraints",
            "0",
            "--out",
            "p.json",
        ],
    );
    let out = ok(
        &dir,
        &[
            "fit",
            "--model",
            "m.json",
            "--problem",
            "p.json",
            "--out",
            "r.json",
        ],
    );
    assert!(out.contains("ordinal absent"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert!(report["loss"].get("ordinal").is_none());
    assert!(report["depth_order_error"].is_null());
}

#[test]
fn malformed_problem_reports_its_line() {
    let (_t, dir) = workspace();
    fs::write(dir.join("bad.json"), "{\n  \"camera\": {\"fx\": 1, \"fy\": 1, \"cx\": 0, \"cy\": 0},\n  \"observations\": [,]\n}").unwrap();
    let out = bodylift(
        &dir,
        &[
            "fit",
            "--model",
            "m.json",
            "--problem",
            "bad.json",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json:3:"));
}

#[test]
fn too_few_observations_exit_with_one() {
    let (_t, dir) = workspace();
    ok(
        &dir,
        &[
            "problem",
            "--model",
            "m.json",
            "--out",
            "p.json",
            "--no-truth",
        ],
    );
    let mut p: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("p.json")).unwrap()).unwrap();
    for (i, o) in p["observations"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .enumerate()
    {
        if i >= 3 {
            o["confidence"] = 0.0.into();
        }
    }
    fs::write(dir.join("p.json"), p.to_string()).unwrap();
    let out = bodylift(
        &dir,
        &[
            "fit",
            "--model",
            "m.json",
            "--problem",
            "p.json",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("only 3 landmarks"));
}

#[test]
fn mesh_exports() {
    let (_t, dir) = workspace();
    let model = bodylift::body_model::load_model(&dir.join("m.json")).unwrap();
    ok(
        &dir,
        &["export-obj", "--model", "m.json", "--out", "rest.obj"],
    );
    let rest = fs::read_to_string(dir.join("rest.obj")).unwrap();
    assert_eq!(
        rest.lines().filter(|l| l.starts_with("v ")).count(),
        model.vertex_count()
    );
    assert_eq!(
        rest.lines().filter(|l| l.starts_with("f ")).count(),
        model.faces.len()
    );

    let identity = bodylift::body_model::PoseState::identity(&model);
    fs::write(
        dir.join("id.json"),
        serde_json::to_string(&identity).unwrap(),
    )
    .unwrap();
    ok(
        &dir,
        &[
            "export-obj",
            "--model",
            "m.json",
            "--state",
            "id.json",
            "--out",
            "id.obj",
        ],
    );
    assert_eq!(fs::read(dir.join("id.obj")).unwrap(), rest.as_bytes());

    small_dataset(&dir);
    ok(
        &dir,
        &[
            "--config",
            "small.toml",
            "train",
            "--model",
            "m.json",
            "--dataset",
            "d.bin",
            "--steps",
            "2",
            "--out",
            "c.ckpt",
        ],
    );
    let d = Dataset::load(&dir.join("d.bin")).unwrap();
    let pts: Vec<[f64; 3]> = d.examples[0]
        .input
        .points
        .iter()
        .map(|p| [p.x, p.y, p.z])
        .collect();
    fs::write(dir.join("lm.json"), serde_json::to_string(&pts).unwrap()).unwrap();
    ok(
        &dir,
        &[
            "export-obj",
            "--model",
            "m.json",
            "--checkpoint",
            "c.ckpt",
            "--landmarks",
            "lm.json",
            "--out",
            "p.obj",
        ],
    );
    let posed = fs::read_to_string(dir.join("p.obj")).unwrap();
    assert_eq!(posed.lines().count(), rest.lines().count());

    let out = bodylift(
        &dir,
        &[
            "export-obj",
            "--model",
            "m.json",
            "--checkpoint",
            "c.ckpt",
            "--out",
            "q.obj",
        ],
    );
    assert_eq!(code(&out), 1);
    let out = bodylift(
        &dir,
        &[
            "export-obj",
            "--model",
            "m.json",
            "--out",
            "no/such/dir/x.obj",
        ],
    );
    assert_eq!(code(&out), 1);
}
