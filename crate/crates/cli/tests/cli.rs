//! End-to-end tests of the gsdyn binary: every subcommand, exit-code
//! behavior, and output determinism. A shared dataset + tiny checkpoint is
//! built once through the binary itself.

use gsdyn_core::geom::Vec3;
use gsdyn_core::metrics::{chamfer, emd, track_eval};
use gsdyn_core::synth::{load_dataset, TrackedSequence};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gsdyn"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn gsdyn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn gsdyn");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"
[data]
episodes = 3
seed = 11

[world]
object = "rope"
rope_particles = 24
rope_length = 0.3
frames = 36

[train]
tau = 2
k = 2
p = 2
hidden_dim = 8
d_v = 0.04
d_e = 0.08
lr = 1e-3
batch_size = 2
batches_per_epoch = 4
epochs = 2
val_fraction = 0.34
seed = 3

[plan]
horizon = 4
num_samples = 8
mpc_iters = 2
steps = 3
seeds = 2
max_step = 0.02
d_v = 0.04
d_e = 0.08
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        let data = dir.path().join("data");
        run_ok(bin().args(["gen-data", "--config"]).arg(&config).arg("--out").arg(&data));
        let model = dir.path().join("model");
        run_ok(
            bin()
                .args(["train", "--config"])
                .arg(&config)
                .arg("--dataset")
                .arg(&data)
                .arg("--out")
                .arg(&model),
        );
        let ckpt = model.join("model.gdyn");
        assert!(ckpt.is_file());
        Fixture { _dir: dir, config, data, ckpt }
    })
}

fn read_traj_csv(path: &Path) -> Vec<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut frames: Vec<Vec<Vec3>> = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let t: usize = cells[0].parse().unwrap();
        if t == frames.len() {
            frames.push(Vec::new());
        }
        frames[t].push(gsdyn_core::geom::vec3(
            cells[2].parse().unwrap(),
            cells[3].parse().unwrap(),
            cells[4].parse().unwrap(),
        ));
    }
    frames
}

#[test]
fn gen_data_writes_a_readable_dataset_with_progress_lines() {
    let fx = fixture();
    let dataset = load_dataset(&fx.data).unwrap();
    assert_eq!(dataset.episodes.len(), 3);
    assert_eq!(dataset.episodes[0].sequence.num_particles(), 24);
    assert!(fx.data.join("manifest_gen_data.txt").is_file());

    let out = run_ok(
        bin()
            .args(["gen-data", "--config"])
            .arg(&fx.config)
            .arg("--out")
            .arg(fx.data.parent().unwrap().join("data_again"))
            .args(["--episodes", "2"]),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("episode 0:"), "stdout: {stdout}");
    assert!(stdout.contains("episode 1:"), "stdout: {stdout}");
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let fx = fixture();
    let twin = fx.data.parent().unwrap().join("data_twin");
    run_ok(bin().args(["gen-data", "--config"]).arg(&fx.config).arg("--out").arg(&twin));
    for name in ["manifest.txt", "ep_0000.trk", "ep_0002.gcloud", "manifest_gen_data.txt"] {
        assert_eq!(
            std::fs::read(fx.data.join(name)).unwrap(),
            std::fs::read(twin.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn gen_data_rejects_missing_out_parent() {
    let fx = fixture();
    let bad = fx.data.parent().unwrap().join("no_such_dir").join("data");
    let stderr =
        run_err(bin().args(["gen-data", "--config"]).arg(&fx.config).arg("--out").arg(&bad));
    assert!(stderr.contains("no_such_dir"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nlerning_rate = 0.1\n").unwrap();
    let stderr = run_err(
        bin()
            .args(["gen-data", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join("d")),
    );
    assert!(stderr.contains("lerning_rate"), "stderr: {stderr}");
    assert!(!dir.path().join("d").exists());
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let fx = fixture();
    let again = fx.data.parent().unwrap().join("model_again");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&fx.config)
            .arg("--dataset")
            .arg(&fx.data)
            .arg("--out")
            .arg(&again),
    );
    assert_eq!(
        std::fs::read(&fx.ckpt).unwrap(),
        std::fs::read(again.join("model.gdyn")).unwrap()
    );
    let report = std::fs::read_to_string(again.join("report.txt")).unwrap();
    assert!(report.contains("epoch=0 "), "report: {report}");
    assert!(report.contains("best_epoch="), "report: {report}");
}

#[test]
fn train_resumes_from_checkpoint() {
    let fx = fixture();
    let resumed = fx.data.parent().unwrap().join("model_resumed");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&fx.config)
            .arg("--dataset")
            .arg(&fx.data)
            .arg("--out")
            .arg(&resumed)
            .arg("--resume")
            .arg(&fx.ckpt)
            .args(["--epochs", "1"]),
    );
    assert!(resumed.join("model.gdyn").is_file());
}

#[test]
fn train_fails_cleanly_without_a_dataset() {
    let fx = fixture();
    let empty = fx.data.parent().unwrap().join("empty_dataset");
    std::fs::create_dir_all(&empty).unwrap();
    let stderr = run_err(
        bin()
            .args(["train", "--config"])
            .arg(&fx.config)
            .arg("--dataset")
            .arg(&empty)
            .arg("--out")
            .arg(fx.data.parent().unwrap().join("model_none")),
    );
    assert!(stderr.contains("manifest.txt"), "stderr: {stderr}");
}

#[test]
fn predict_writes_horizon_plus_one_frames() {
    let fx = fixture();
    let out = fx.data.parent().unwrap().join("pred5");
    run_ok(
        bin()
            .args(["predict", "--config"])
            .arg(&fx.config)
            .arg("--checkpoint")
            .arg(&fx.ckpt)
            .arg("--dataset")
            .arg(&fx.data)
            .args(["--episode", "2", "--horizon", "5", "--out"])
            .arg(&out),
    );
    let clouds: Vec<_> = std::fs::read_dir(out.join("frames"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "gcloud"))
        .collect();
    assert_eq!(clouds.len(), 6);
    let pred = read_traj_csv(&out.join("pred_control.csv"));
    let truth = read_traj_csv(&out.join("truth_control.csv"));
    assert_eq!(pred.len(), 6);
    assert_eq!(truth.len(), 6);
    assert_eq!(pred[0], truth[0], "frame 0 is the observed state");
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("final_chamfer="), "metrics: {metrics}");
    assert!(metrics.contains("mte_mm="), "metrics: {metrics}");
}

#[test]
fn predict_horizon_zero_echoes_the_initial_state() {
    let fx = fixture();
    let out = fx.data.parent().unwrap().join("pred0");
    run_ok(
        bin()
            .args(["predict", "--config"])
            .arg(&fx.config)
            .arg("--checkpoint")
            .arg(&fx.ckpt)
            .arg("--dataset")
            .arg(&fx.data)
            .args(["--horizon", "0", "--out"])
            .arg(&out),
    );
    let pred = read_traj_csv(&out.join("pred_control.csv"));
    assert_eq!(pred.len(), 1);
    assert_eq!(pred, read_traj_csv(&out.join("truth_control.csv")));
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("final_chamfer=0.000000000e0"), "metrics: {metrics}");
}

#[test]
fn predict_rejects_out_of_range_windows() {
    let fx = fixture();
    let stderr = run_err(
        bin()
            .args(["predict", "--config"])
            .arg(&fx.config)
            .arg("--checkpoint")
            .arg(&fx.ckpt)
            .arg("--dataset")
            .arg(&fx.data)
            .args(["--start", "30", "--horizon", "10", "--out"])
            .arg(fx.data.parent().unwrap().join("pred_bad")),
    );
    assert!(stderr.contains("runs past the episode"), "stderr: {stderr}");
}

#[test]
fn render_one_cloud_gives_one_png() {
    let fx = fixture();
    let root = fx.data.parent().unwrap();
    let out = root.join("png_one");
    run_ok(
        bin()
            .args(["render", "--frames"])
            .arg(fx.data.join("ep_0000.gcloud"))
            .arg("--out")
            .arg(&out),
    );
    let pngs: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 1);
    assert!(out.join("ep_0000.png").is_file());
}

#[test]
fn render_directory_with_alpha_is_deterministic() {
    let fx = fixture();
    let root = fx.data.parent().unwrap();
    let (a, b) = (root.join("png_a"), root.join("png_b"));
    for out in [&a, &b] {
        run_ok(
            bin()
                .args(["render", "--frames"])
                .arg(&fx.data)
                .arg("--out")
                .arg(out)
                .arg("--alpha"),
        );
    }
    for name in ["ep_0000.png", "ep_0000_alpha.png", "ep_0002.png"] {
        assert!(a.join(name).is_file(), "{name} missing");
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn plan_hold_target_out_of_reach_keeps_error_flat() {
    let fx = fixture();
    let root = fx.data.parent().unwrap();
    let config = root.join("plan_hold.toml");
    // Pusher parked far from the rope with a step budget too small to make
    // contact: the object cannot move, so error stays at its initial value.
    let mut text = SMALL_CONFIG.replace("[world]", "[world]\neffector = \"pusher\"");
    text.push_str("\n[target]\nkind = \"hold\"\n\n[prep]\nstart = [0.3, 0.3, 0.1]\n");
    std::fs::write(&config, text).unwrap();
    let out = root.join("plan_hold");
    run_ok(
        bin()
            .args(["plan", "--config"])
            .arg(&config)
            .arg("--checkpoint")
            .arg(&fx.ckpt)
            .arg("--out")
            .arg(&out),
    );
    let csv = std::fs::read_to_string(out.join("error_curves.csv")).unwrap();
    let medians: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(medians.len(), 4, "3 steps -> 4 observations");
    for m in &medians {
        assert_eq!(*m, medians[0], "curve should be flat: {medians:?}");
    }
    assert!(out.join("success_rate.csv").is_file());
    assert!(out.join("outcome_seed0.txt").is_file());
    assert!(out.join("outcome_seed1.txt").is_file());
    let success = std::fs::read_to_string(out.join("success_rate.csv")).unwrap();
    assert_eq!(success.lines().count(), 26, "header plus 25 thresholds");
    let last = success.lines().last().unwrap();
    assert!(last.ends_with("1.000000"), "largest threshold catches all runs: {last}");
}

#[test]
fn eval_perfect_match_scores_perfectly() {
    let fx = fixture();
    let root = fx.data.parent().unwrap();
    let out = root.join("eval_perfect");
    let trk = fx.data.join("ep_0000.trk");
    let output = run_ok(
        bin().args(["eval", "--pred"]).arg(&trk).arg("--gt").arg(&trk).arg("--out").arg(&out),
    );
    let text = std::fs::read_to_string(out.join("eval.txt")).unwrap();
    assert!(text.contains("mean_chamfer=0.000000000e0"), "eval: {text}");
    assert!(text.contains("mean_emd=0.000000000e0"), "eval: {text}");
    assert!(text.contains("mte_mm=0.000000000e0"), "eval: {text}");
    assert!(text.contains("delta_avg_pct=1.000000000e2"), "eval: {text}");
    assert!(text.contains("survival_pct=1.000000000e2"), "eval: {text}");
    assert_eq!(String::from_utf8_lossy(&output.stdout), text, "stdout mirrors eval.txt");
}

#[test]
fn eval_matches_library_calls_bitwise() {
    let fx = fixture();
    let root = fx.data.parent().unwrap();
    let out = root.join("eval_pair");
    run_ok(
        bin()
            .args(["eval", "--pred"])
            .arg(fx.data.join("ep_0000.trk"))
            .arg("--gt")
            .arg(fx.data.join("ep_0001.trk"))
            .arg("--out")
            .arg(&out),
    );
    let pred = TrackedSequence::load(&fx.data.join("ep_0000.trk")).unwrap().positions;
    let gt = TrackedSequence::load(&fx.data.join("ep_0001.trk")).unwrap().positions;
    let (mut chamfer_sum, mut emd_sum) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(&gt) {
        chamfer_sum += chamfer(p, g).unwrap();
        emd_sum += emd(p, g).unwrap();
    }
    let te = track_eval(&pred, &gt).unwrap();
    let text = std::fs::read_to_string(out.join("eval.txt")).unwrap();
    let expect_line = |line: &str| {
        assert!(text.contains(line), "expected {line:?} in:\n{text}");
    };
    expect_line(&format!("mean_chamfer={:.9e}", chamfer_sum / pred.len() as f64));
    expect_line(&format!("mean_emd={:.9e}", emd_sum / pred.len() as f64));
    expect_line(&format!("mte_mm={:.9e}", te.mte));
    expect_line(&format!("delta_avg_pct={:.9e}", te.delta_avg_pct));
    expect_line(&format!("survival_pct={:.9e}", te.survival_pct));
}

#[test]
fn eval_rejects_shape_mismatches() {
    let fx = fixture();
    let root = fx.data.parent().unwrap();
    let short = root.join("short.csv");
    std::fs::write(&short, "frame,point,x,y,z\n0,0,0,0,0\n0,1,1,0,0\n").unwrap();
    let stderr = run_err(
        bin()
            .args(["eval", "--pred"])
            .arg(&short)
            .arg("--gt")
            .arg(fx.data.join("ep_0000.trk"))
            .arg("--out")
            .arg(root.join("eval_mismatch")),
    );
    assert!(stderr.contains("frame count mismatch"), "stderr: {stderr}");

    let wide = root.join("wide.csv");
    std::fs::write(&wide, "frame,point,x,y,z\n0,0,0,0,0\n0,1,1,0,0\n0,2,2,0,0\n").unwrap();
    let stderr = run_err(
        bin()
            .args(["eval", "--pred"])
            .arg(&short)
            .arg("--gt")
            .arg(&wide)
            .arg("--out")
            .arg(root.join("eval_mismatch2")),
    );
    assert!(stderr.contains("point count mismatch"), "stderr: {stderr}");
}
