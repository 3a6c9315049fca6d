//! End-to-end runs of the `vcp` binary at miniature scale: the full
//! generate -> pretrain -> finetune -> probe -> retrieve pipeline through
//! file handoffs, plus exit-code and error-message contracts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vcp() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vcp"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_code(output: &Output, expected: i32) {
    assert_eq!(
        output.status.code(),
        Some(expected),
        "stdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

/// Tiny corpus and network: 2 classes x 3 videos, 2-stage backbone.
const TINY_CONFIG: &str = r#"
seed = 7

[synthetic]
num_classes = 2
videos_per_class = 3
test_per_class = 1
frame_count = 48
object_size = 5

[backbone]
input = [3, 8, 16, 16]
feature_dim = 8
stages = [
    { out_channels = 4, pool_window = [2, 2, 2], pool_stride = [2, 2, 2] },
    { out_channels = 8, pool_window = [2, 2, 2], pool_stride = [2, 2, 2] },
]

[train]
epochs = 2
batch_size = 4
eval_every = 2
eval_items_per_video = 1
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("experiment.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn pipeline_runs_end_to_end_and_pretraining_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    let out = run(vcp().args(["generate", "--config", &config, "--out", &path("corpus")]));
    assert_code(&out, 0);
    assert!(dir.path().join("corpus/manifest.jsonl").exists());
    assert!(dir.path().join("corpus/spec.json").exists());
    assert!(dir.path().join("corpus/c00_v000.vcpv").exists());
    assert!(stdout(&out).contains("6 videos"));

    let manifest = path("corpus/manifest.jsonl");
    for run_dir in ["run1", "run2"] {
        let out = run(vcp().args([
            "pretrain",
            "--config",
            &config,
            "--manifest",
            &manifest,
            "--out",
            &path(run_dir),
        ]));
        assert_code(&out, 0);
    }
    let checkpoint = |d: &str| fs::read(dir.path().join(d).join("checkpoint_final.ckpt")).unwrap();
    let log = |d: &str| fs::read(dir.path().join(d).join("train_log.jsonl")).unwrap();
    assert_eq!(checkpoint("run1"), checkpoint("run2"), "checkpoints diverged");
    assert_eq!(log("run1"), log("run2"), "logs diverged");

    let init = path("run1/checkpoint_final.ckpt");
    let out = run(vcp().args([
        "finetune",
        "--config",
        &config,
        "--manifest",
        &manifest,
        "--out",
        &path("finetuned"),
        "--init",
        &init,
    ]));
    assert_code(&out, 0);
    assert!(dir.path().join("finetuned/checkpoint_final.ckpt").exists());
    assert!(stdout(&out).contains("finetune: 2 epochs"));

    let out = run(vcp().args([
        "probe",
        "--config",
        &config,
        "--manifest",
        &manifest,
        "--out",
        &path("probed"),
        "--init",
        &init,
        "--epochs",
        "5",
    ]));
    assert_code(&out, 0);
    let assessment = fs::read_to_string(dir.path().join("probed/assessment.csv")).unwrap();
    let mut lines = assessment.lines();
    assert!(lines.next().unwrap().starts_with("# config:"));
    assert_eq!(lines.next().unwrap(), "epoch,overall,O,SR,SP,TR,TA");
    assert!(lines.next().unwrap().starts_with("5,"));
    assert!(dir.path().join("probed/probe_log.jsonl").exists());

    let out = run(vcp().args([
        "retrieve",
        "--config",
        &config,
        "--manifest",
        &manifest,
        "--out",
        &path("retrieved"),
        "--init",
        &init,
        "--k",
        "1,2",
    ]));
    assert_code(&out, 0);
    assert!(stdout(&out).contains("top-1 hit rate"));
    let rates = fs::read_to_string(dir.path().join("retrieved/hit_rates.csv")).unwrap();
    assert!(rates.lines().nth(1).unwrap().starts_with("k,hit_rate"));
    assert_eq!(rates.lines().count(), 4); // comment, header, two depths
    let rankings = fs::read_to_string(dir.path().join("retrieved/retrieval.csv")).unwrap();
    assert!(rankings.contains("query_id,rank,gallery_id,label,similarity"));

    // Retrieval depth beyond the 4-video gallery is a config error.
    let out = run(vcp().args([
        "retrieve",
        "--config",
        &config,
        "--manifest",
        &manifest,
        "--out",
        &path("retrieved_bad"),
        "--init",
        &init,
        "--k",
        "99",
    ]));
    assert_code(&out, 2);
    assert!(stderr(&out).contains("outside [1, 4]"));
}

#[test]
fn config_errors_exit_2_and_name_the_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochs = \"six\"\n").unwrap();
    let out = run(vcp().args([
        "pretrain",
        "--config",
        bad.to_str().unwrap(),
        "--manifest",
        "unused.jsonl",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]));
    assert_code(&out, 2);
    let err = stderr(&out);
    assert!(err.contains("line 2"), "missing location in: {err}");

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "[train]\nepoch = 3\n").unwrap();
    let out = run(vcp().args(["gradcheck", "--config", typo.to_str().unwrap()]));
    assert_code(&out, 2);
    assert!(stderr(&out).contains("epoch"), "missing key in: {}", stderr(&out));
}

#[test]
fn missing_inputs_map_to_the_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());

    // Unreadable manifest: data error.
    let out = run(vcp().args([
        "pretrain",
        "--config",
        &config,
        "--manifest",
        dir.path().join("no_such.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]));
    assert_code(&out, 3);

    // Probe without an init checkpoint: config error.
    let out = run(vcp().args([
        "probe",
        "--config",
        &config,
        "--manifest",
        "unused.jsonl",
        "--out",
        dir.path().join("out2").to_str().unwrap(),
        "--epochs",
        "5",
    ]));
    assert_code(&out, 2);
    assert!(stderr(&out).contains("--init"), "got: {}", stderr(&out));

    // Probe epochs off the scoring cadence: config error.
    let out = run(vcp().args([
        "probe",
        "--config",
        &config,
        "--manifest",
        "unused.jsonl",
        "--out",
        dir.path().join("out2b").to_str().unwrap(),
        "--init",
        "unused.ckpt",
        "--epochs",
        "7",
    ]));
    assert_code(&out, 2);
    assert!(stderr(&out).contains("multiple of 5"), "got: {}", stderr(&out));

    // No manifest anywhere: config error naming the fix.
    let out = run(vcp().args([
        "pretrain",
        "--config",
        &config,
        "--out",
        dir.path().join("out3").to_str().unwrap(),
    ]));
    assert_code(&out, 2);
    assert!(stderr(&out).contains("--manifest"));
}

#[test]
fn gradcheck_passes_on_the_tiny_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(vcp().args(["gradcheck", "--config", &config, "--samples", "4"]));
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("PASS"), "got: {text}");
    assert!(text.contains("backbone.stage0.weights"), "got: {text}");
}
