//! End-to-end smoke over the library: synthesize a small rope dataset, train
//! a tiny model, roll it out on the held-out episode, densify the prediction
//! onto the paired Gaussian cloud, render it, and run a plan against the
//! trained dynamics. Everything stays small enough to finish in seconds; the
//! point is that the stages compose, not that the model is good.

use gsdyn_core::gaussians::{densify_rollout, DensifyOptions};
use gsdyn_core::geom::{vec3, Vec3};
use gsdyn_core::graph::{build_graph, load_params, rollout, HistorySource};
use gsdyn_core::metrics::chamfer;
use gsdyn_core::plan::{mppi_plan, CostMode, PlanConfig};
use gsdyn_core::render::{render, CameraModel};
use gsdyn_core::synth::{load_dataset, make_dataset, ObjectKind, WorldConfig};
use gsdyn_core::train::{train, Reduction, TrainConfig};

#[test]
fn dataset_to_plan_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    let mut world = WorldConfig::rope();
    world.object = ObjectKind::Rope { length: 0.3, particles: 24 };
    world.frames = 36;
    make_dataset(&world, 3, 11, &data_dir).unwrap();
    let dataset = load_dataset(&data_dir).unwrap();
    assert_eq!(dataset.episodes.len(), 3);

    let cfg = TrainConfig {
        tau: 2,
        k: 2,
        p: 2,
        hidden_dim: 8,
        d_v: 0.04,
        d_e: 0.08,
        lr: 1e-3,
        batch_size: 2,
        batches_per_epoch: 4,
        epochs: 2,
        lambda_edge: 0.1,
        lambda_rigid: 0.0,
        rigid: false,
        reduction: Reduction::Mean,
        val_fraction: 0.34,
        rng_seed: 3,
    };
    let ckpt = dir.path().join("model.gdyn");
    let (params, report) = train(&dataset, &cfg, &ckpt).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.best_val_total.is_finite());
    assert!(ckpt.is_file());
    assert!(ckpt.with_extension("manifest.txt").is_file());
    let reloaded = load_params(&ckpt).unwrap();
    assert_eq!(reloaded, params, "checkpoint restores the trained weights");

    // Roll out on the validation episode (the split holds out the tail).
    let episode = &dataset.episodes[2];
    let seq = &episode.sequence;
    let t = cfg.k;
    let horizon = 5;
    let graph0 = build_graph(
        &seq.positions[t],
        seq.actions[t],
        cfg.d_v,
        cfg.d_e,
        cfg.k,
        seq.table_height,
        HistorySource {
            object: &seq.positions[t - cfg.k..t],
            effector: &seq.actions[t - cfg.k..t],
        },
    )
    .unwrap();
    let actions = &seq.actions[t + 1..t + 1 + horizon];
    let frames = rollout(&params, &graph0, actions).unwrap();
    assert_eq!(frames.len(), horizon);
    let n_obj = graph0.num_object_vertices();
    for frame in &frames {
        assert_eq!(frame.len(), n_obj + 1);
        assert!(frame.iter().all(|p| p.is_finite()));
    }

    let truth_last: Vec<Vec3> = graph0
        .source_indices
        .iter()
        .map(|&src| seq.positions[t + horizon][src])
        .collect();
    let err = chamfer(&frames[horizon - 1][..n_obj], &truth_last).unwrap();
    assert!(err.is_finite() && err >= 0.0);

    // Densify the predicted control motion onto the episode's cloud.
    let mut control_traj = vec![graph0.object_positions().to_vec()];
    control_traj.extend(frames.iter().map(|f| f[..n_obj].to_vec()));
    let clouds =
        densify_rollout(&episode.cloud, &control_traj, DensifyOptions::default()).unwrap();
    assert_eq!(clouds.len(), control_traj.len());
    assert_eq!(clouds[0].centers, episode.cloud.centers);

    let camera = CameraModel::look_at(
        vec3(0.0, -0.5, 0.4),
        vec3(0.0, 0.0, 0.0),
        vec3(0.0, 0.0, 1.0),
        120.0,
        96,
        72,
    )
    .unwrap();
    let image = render(clouds.last().unwrap(), &camera).unwrap();
    assert_eq!((image.width, image.height), (96, 72));
    let mut any_hit = false;
    for y in 0..image.height {
        for x in 0..image.width {
            let a = image.alpha_at(x, y);
            assert!((0.0..=1.0).contains(&a));
            any_hit |= a > 0.0;
        }
    }
    assert!(any_hit, "rendered rope leaves no trace in the image");

    // Plan against the trained dynamics toward the observed future state.
    let plan_cfg = PlanConfig {
        horizon: 4,
        num_samples: 8,
        mpc_iters: 2,
        cost_mode: CostMode::Correspondence,
        rng_seed: 5,
        ..PlanConfig::default()
    };
    let plan = mppi_plan(&params, &graph0, &truth_last, &plan_cfg).unwrap();
    assert_eq!(plan.actions.len(), 4);
    assert!(plan.predicted_cost.is_finite());
    assert!(plan.cost_trace.windows(2).all(|w| w[1] <= w[0]));
}
