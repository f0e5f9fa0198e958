//! Command implementations. Every command resolves its configuration up
//! front, does the work, writes its outputs plus a manifest echoing the
//! resolved settings, and returns Ok only when everything on disk checks out.

use crate::config::{
    camera_entries, plan_entries, train_entries, vec3_entry, world_entries, FileConfig,
    ManifestEcho, TargetSpec,
};
use crate::{EvalArgs, GenDataArgs, PlanArgs, PredictArgs, RenderArgs, TrainArgs};
use anyhow::{bail, Context, Result};
use gsdyn_core::gaussians::{densify_rollout, DensifyOptions, GaussianCloud};
use gsdyn_core::geom::Vec3;
use gsdyn_core::graph::{build_graph, load_params, rollout, HistorySource};
use gsdyn_core::metrics::{chamfer, emd, track_eval};
use gsdyn_core::plan::{mpc_execute, straighten_target, PlanConfig};
use gsdyn_core::render::render;
use gsdyn_core::synth::{load_dataset, make_dataset, SynthWorld, TrackedSequence};
use gsdyn_core::train::train_from;
use std::path::{Path, PathBuf};

/// Creates the output directory itself but refuses to invent its parents;
/// a typo in the destination should fail loudly, not build a tree.
fn prepare_out_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            bail!("output directory parent does not exist: {}", parent.display());
        }
    }
    std::fs::create_dir_all(path)
        .with_context(|| format!("creating output directory {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require_files(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            bail!("expected output is missing: {}", p.display());
        }
    }
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let world = cfg.world.build(args.object.as_deref(), args.frames)?;
    let episodes = args.episodes.or(cfg.data.episodes).unwrap_or(10);
    let seed = args.seed.or(cfg.data.seed).unwrap_or(0);
    if episodes == 0 {
        bail!("refusing to write an empty dataset (episodes = 0)");
    }

    prepare_out_dir(&args.out)?;
    make_dataset(&world, episodes, seed, &args.out)?;

    // Read the dataset back; what we cannot reload we did not deliver.
    let dataset = load_dataset(&args.out)?;
    for (i, ep) in dataset.episodes.iter().enumerate() {
        let trk = args.out.join(format!("ep_{i:04}.trk"));
        let bytes = std::fs::metadata(&trk).map(|m| m.len()).unwrap_or(0);
        println!(
            "episode {i}: {} frames={} particles={} bytes={bytes}",
            trk.display(),
            ep.sequence.num_frames(),
            ep.sequence.num_particles(),
        );
    }

    ManifestEcho::new("gen-data")
        .section("data", &[("episodes", episodes.to_string()), ("seed", seed.to_string())])
        .section("world", &world_entries(&world))
        .write(&args.out.join("manifest_gen_data.txt"))?;
    println!("dataset written to {} ({} episodes)", args.out.display(), episodes);
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let tc = cfg.train.build(args.epochs, args.seed)?;
    let dataset = load_dataset(&args.dataset)?;
    if dataset.episodes.is_empty() {
        bail!("dataset {} has no episodes to train on", args.dataset.display());
    }
    let init = match &args.resume {
        Some(ckpt) => Some(
            load_params(ckpt).with_context(|| format!("loading resume checkpoint {}", ckpt.display()))?,
        ),
        None => None,
    };

    prepare_out_dir(&args.out)?;
    let checkpoint = args.out.join("model.gdyn");
    let (params, report) = train_from(&dataset, &tc, init, &checkpoint)?;
    write_text(&args.out.join("report.txt"), &report.to_text())?;

    let reloaded = load_params(&checkpoint)?;
    if reloaded != params {
        bail!("checkpoint round-trip mismatch at {}", checkpoint.display());
    }
    ManifestEcho::new("train")
        .section("train", &train_entries(&tc))
        .write(&args.out.join("manifest_train.txt"))?;
    require_files(&[checkpoint.clone(), args.out.join("report.txt")])?;
    println!(
        "trained {} epochs; best epoch {} val total {:.6e}; checkpoint {}",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_total,
        checkpoint.display()
    );
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let tc = cfg.train.build(None, None)?;
    let params = load_params(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    let Some(episode) = dataset.episodes.get(args.episode) else {
        bail!("episode {} out of range (dataset has {})", args.episode, dataset.episodes.len());
    };
    let seq = &episode.sequence;
    let frames = seq.num_frames();
    let start = args.start.unwrap_or(params.k);
    if start < params.k {
        bail!("start frame {start} needs {} history frames before it", params.k);
    }
    if start + args.horizon > frames - 1 {
        bail!(
            "start {start} + horizon {} runs past the episode ({} frames)",
            args.horizon,
            frames
        );
    }

    let graph0 = build_graph(
        &seq.positions[start],
        seq.actions[start],
        tc.d_v,
        tc.d_e,
        params.k,
        seq.table_height,
        HistorySource {
            object: &seq.positions[start - params.k..start],
            effector: &seq.actions[start - params.k..start],
        },
    )?;
    let mut pred = vec![graph0.object_positions().to_vec()];
    if args.horizon > 0 {
        let future = &seq.actions[start + 1..start + 1 + args.horizon];
        let n_obj = graph0.num_object_vertices();
        for frame in rollout(&params, &graph0, future)? {
            pred.push(frame[..n_obj].to_vec());
        }
    }
    let truth: Vec<Vec<Vec3>> = (0..=args.horizon)
        .map(|h| graph0.source_indices.iter().map(|&s| seq.positions[start + h][s]).collect())
        .collect();

    prepare_out_dir(&args.out)?;
    write_traj_csv(&args.out.join("pred_control.csv"), &pred)?;
    write_traj_csv(&args.out.join("truth_control.csv"), &truth)?;
    let effector: Vec<Vec<Vec3>> =
        seq.actions[start..=start + args.horizon].iter().map(|a| vec![*a]).collect();
    write_traj_csv(&args.out.join("effector.csv"), &effector)?;

    let opts = DensifyOptions {
        edge_radius: cfg.predict.densify_radius.unwrap_or(DensifyOptions::default().edge_radius),
        top_k: cfg.predict.densify_top_k.unwrap_or(DensifyOptions::default().top_k),
    };
    let cloud_start = GaussianCloud {
        centers: seq.positions[start].clone(),
        rotations: episode.cloud.rotations.clone(),
        scales: episode.cloud.scales.clone(),
        colors: episode.cloud.colors.clone(),
        opacities: episode.cloud.opacities.clone(),
    };
    let clouds = densify_rollout(&cloud_start, &pred, opts)?;
    let frames_dir = args.out.join("frames");
    prepare_out_dir(&frames_dir)?;
    let mut cloud_paths = Vec::new();
    for (i, cloud) in clouds.iter().enumerate() {
        let p = frames_dir.join(format!("frame_{i:04}.gcloud"));
        cloud.save(&p)?;
        cloud_paths.push(p);
    }

    let mut metrics = String::new();
    for h in 0..=args.horizon {
        metrics.push_str(&format!("step={h} chamfer={:.9e}\n", chamfer(&pred[h], &truth[h])?));
    }
    let final_chamfer = chamfer(&pred[args.horizon], &truth[args.horizon])?;
    metrics.push_str(&format!("final_chamfer={final_chamfer:.9e}\n"));
    let te = track_eval(&pred, &truth)?;
    metrics.push_str(&format!("mte_mm={:.9e}\n", te.mte));
    for (mm, pct) in [2, 4, 8, 16].iter().zip(te.delta_pct) {
        metrics.push_str(&format!("delta_{mm}mm_pct={pct:.9e}\n"));
    }
    metrics.push_str(&format!("delta_avg_pct={:.9e}\n", te.delta_avg_pct));
    metrics.push_str(&format!("survival_pct={:.9e}\n", te.survival_pct));
    write_text(&args.out.join("metrics.txt"), &metrics)?;

    ManifestEcho::new("predict")
        .section("train", &train_entries(&tc))
        .section("predict", &[
            ("densify_radius", opts.edge_radius.to_string()),
            ("densify_top_k", opts.top_k.to_string()),
        ])
        .section("run", &[
            ("episode", args.episode.to_string()),
            ("start", start.to_string()),
            ("horizon", args.horizon.to_string()),
        ])
        .write(&args.out.join("manifest_predict.txt"))?;

    let mut outputs = vec![
        args.out.join("pred_control.csv"),
        args.out.join("truth_control.csv"),
        args.out.join("effector.csv"),
        args.out.join("metrics.txt"),
    ];
    outputs.extend(cloud_paths);
    require_files(&outputs)?;
    println!(
        "predicted {} control vertices over {} steps; final chamfer {final_chamfer:.6e} m, \
         mte {:.3} mm; {} cloud frames in {}",
        pred[0].len(),
        args.horizon,
        te.mte,
        clouds.len(),
        frames_dir.display()
    );
    Ok(())
}

pub fn render_frames(args: RenderArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let camera = cfg.camera.build()?;

    let mut inputs: Vec<PathBuf> = if args.frames.is_dir() {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(&args.frames)
            .with_context(|| format!("reading {}", args.frames.display()))?
        {
            let path = entry.with_context(|| format!("reading {}", args.frames.display()))?.path();
            if path.extension().is_some_and(|e| e == "gcloud") {
                v.push(path);
            }
        }
        v
    } else if args.frames.is_file() {
        vec![args.frames.clone()]
    } else {
        bail!("no such file or directory: {}", args.frames.display());
    };
    inputs.sort();
    if inputs.is_empty() {
        bail!("no .gcloud frames found in {}", args.frames.display());
    }

    prepare_out_dir(&args.out)?;
    let mut outputs = Vec::new();
    for input in &inputs {
        let cloud = GaussianCloud::load(input)?;
        let frame = render(&cloud, &camera)?;
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow::anyhow!("unusable file name: {}", input.display()))?;
        let png = args.out.join(format!("{stem}.png"));
        frame.save_png(&png)?;
        outputs.push(png);
        if args.alpha {
            let alpha = args.out.join(format!("{stem}_alpha.png"));
            frame.save_alpha_png(&alpha)?;
            outputs.push(alpha);
        }
    }

    ManifestEcho::new("render")
        .section("camera", &camera_entries(&camera))
        .write(&args.out.join("manifest_render.txt"))?;
    require_files(&outputs)?;
    println!("rendered {} frames to {}", inputs.len(), args.out.display());
    Ok(())
}

pub fn plan(args: PlanArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let world_cfg = cfg.world.build(None, None)?;
    let resolved = cfg.plan.build(args.steps, args.seeds, args.seed)?;
    let target_spec = cfg.target.build()?;
    let prep = cfg.prep.build();
    let params = load_params(&args.checkpoint)?;

    prepare_out_dir(&args.out)?;
    let mut curves: Vec<Vec<f64>> = Vec::with_capacity(resolved.seeds);
    let mut outcome_paths = Vec::new();
    for run in 0..resolved.seeds {
        // Same scripted world every run; only the planner noise differs.
        let mut world = SynthWorld::new(&world_cfg, prep.start)?;
        if prep.grasp {
            let held = world.begin_grasp();
            if held == 0 {
                log::warn!("prep grasp at {} held nothing", vec3_entry(prep.start));
            }
        }
        for wp in &prep.waypoints {
            world.step_to(*wp)?;
        }
        if prep.grasp {
            world.release_grasp();
        }

        let target = match &target_spec {
            TargetSpec::Hold => world.positions().to_vec(),
            TargetSpec::Line { anchor, direction } => {
                let anchor = anchor.unwrap_or(world.positions()[0]);
                straighten_target(world.positions(), anchor, *direction)?
            }
        };
        let run_cfg = PlanConfig {
            rng_seed: resolved.cfg.rng_seed.wrapping_add(run as u64),
            ..resolved.cfg.clone()
        };
        let outcome = mpc_execute(
            &params,
            &mut world,
            &target,
            resolved.d_v,
            resolved.d_e,
            &run_cfg,
            resolved.steps,
        )?;
        println!(
            "seed {run}: initial {:.6e} final {:.6e}",
            outcome.error_curve[0],
            outcome.error_curve[outcome.error_curve.len() - 1]
        );
        let path = args.out.join(format!("outcome_seed{run}.txt"));
        write_text(&path, &outcome.to_text())?;
        outcome_paths.push(path);
        curves.push(outcome.error_curve);
    }

    let rows = resolved.steps + 1;
    let mut curve_csv = String::from("step");
    for run in 0..resolved.seeds {
        curve_csv.push_str(&format!(",seed{run}"));
    }
    curve_csv.push_str(",median\n");
    let mut medians = Vec::with_capacity(rows);
    for s in 0..rows {
        curve_csv.push_str(&s.to_string());
        for curve in &curves {
            curve_csv.push_str(&format!(",{:.9e}", curve[s]));
        }
        let m = median(curves.iter().map(|c| c[s]).collect());
        curve_csv.push_str(&format!(",{m:.9e}\n"));
        medians.push(m);
    }
    write_text(&args.out.join("error_curves.csv"), &curve_csv)?;

    // Success-rate curve: fraction of runs whose final error lands under each
    // threshold, swept over a range sized to the observed initial errors.
    let e0_max = curves.iter().map(|c| c[0]).fold(0.0, f64::max).max(1e-3);
    let mut success_csv = String::from("threshold,success_rate\n");
    for j in 0..=24 {
        let threshold = 1.25 * e0_max * j as f64 / 24.0;
        let hits = curves.iter().filter(|c| c[c.len() - 1] <= threshold).count();
        success_csv.push_str(&format!(
            "{threshold:.9e},{:.6}\n",
            hits as f64 / curves.len() as f64
        ));
    }
    write_text(&args.out.join("success_rate.csv"), &success_csv)?;

    let target_entries: Vec<(&str, String)> = match &target_spec {
        TargetSpec::Hold => vec![("kind", "hold".to_string())],
        TargetSpec::Line { anchor, direction } => vec![
            ("kind", "line".to_string()),
            (
                "anchor",
                anchor.map(vec3_entry).unwrap_or_else(|| "first particle".to_string()),
            ),
            ("direction", vec3_entry(*direction)),
        ],
    };
    let waypoints = prep
        .waypoints
        .iter()
        .map(|w| vec3_entry(*w))
        .collect::<Vec<_>>()
        .join(", ");
    ManifestEcho::new("plan")
        .section("world", &world_entries(&world_cfg))
        .section("plan", &plan_entries(&resolved))
        .section("target", &target_entries)
        .section("prep", &[
            ("start", vec3_entry(prep.start)),
            ("grasp", prep.grasp.to_string()),
            ("waypoints", format!("[{waypoints}]")),
        ])
        .write(&args.out.join("manifest_plan.txt"))?;

    let mut outputs =
        vec![args.out.join("error_curves.csv"), args.out.join("success_rate.csv")];
    outputs.extend(outcome_paths);
    require_files(&outputs)?;
    println!(
        "{} runs of {} MPC steps: median error {:.6e} -> {:.6e}",
        resolved.seeds,
        resolved.steps,
        medians[0],
        medians[rows - 1]
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let pred = load_trajectory(&args.pred)?;
    let gt = load_trajectory(&args.gt)?;
    if pred.len() != gt.len() {
        bail!("frame count mismatch: pred has {}, gt has {}", pred.len(), gt.len());
    }
    if pred.is_empty() {
        bail!("empty trajectories");
    }
    for (t, (p, g)) in pred.iter().zip(&gt).enumerate() {
        if p.len() != g.len() {
            bail!("point count mismatch at frame {t}: pred has {}, gt has {}", p.len(), g.len());
        }
    }

    prepare_out_dir(&args.out)?;
    let mut table = String::from("frame,chamfer,emd\n");
    let (mut chamfer_sum, mut emd_sum) = (0.0, 0.0);
    for (t, (p, g)) in pred.iter().zip(&gt).enumerate() {
        let (c, e) = (chamfer(p, g)?, emd(p, g)?);
        chamfer_sum += c;
        emd_sum += e;
        table.push_str(&format!("{t},{c:.9e},{e:.9e}\n"));
    }
    write_text(&args.out.join("eval.csv"), &table)?;

    let te = track_eval(&pred, &gt)?;
    let mut text = format!("frames={}\npoints={}\n", pred.len(), pred[0].len());
    text.push_str(&format!("mean_chamfer={:.9e}\n", chamfer_sum / pred.len() as f64));
    text.push_str(&format!("mean_emd={:.9e}\n", emd_sum / pred.len() as f64));
    text.push_str(&format!("mte_mm={:.9e}\n", te.mte));
    for (mm, pct) in [2, 4, 8, 16].iter().zip(te.delta_pct) {
        text.push_str(&format!("delta_{mm}mm_pct={pct:.9e}\n"));
    }
    text.push_str(&format!("delta_avg_pct={:.9e}\n", te.delta_avg_pct));
    text.push_str(&format!("survival_pct={:.9e}\n", te.survival_pct));
    write_text(&args.out.join("eval.txt"), &text)?;
    print!("{text}");
    require_files(&[args.out.join("eval.csv"), args.out.join("eval.txt")])?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Trajectory table: one row per (frame, point), 17 fractional digits so the
/// values survive a round-trip exactly.
fn write_traj_csv(path: &Path, frames: &[Vec<Vec3>]) -> Result<()> {
    let mut s = String::from("frame,point,x,y,z\n");
    for (t, frame) in frames.iter().enumerate() {
        for (i, p) in frame.iter().enumerate() {
            s.push_str(&format!("{t},{i},{:.17e},{:.17e},{:.17e}\n", p.x, p.y, p.z));
        }
    }
    write_text(path, &s)
}

fn read_traj_csv(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "frame,point,x,y,z")) => {}
        _ => bail!("{}: expected header frame,point,x,y,z", path.display()),
    }
    let mut frames: Vec<Vec<Vec3>> = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            bail!("{}: line {}: expected 5 columns", path.display(), lineno + 1);
        }
        let parse = |cell: &str, what: &str| -> Result<f64> {
            cell.parse::<f64>().with_context(|| {
                format!("{}: line {}: bad {what} value {cell:?}", path.display(), lineno + 1)
            })
        };
        let t: usize = cells[0].parse().with_context(|| {
            format!("{}: line {}: bad frame index {:?}", path.display(), lineno + 1, cells[0])
        })?;
        let i: usize = cells[1].parse().with_context(|| {
            format!("{}: line {}: bad point index {:?}", path.display(), lineno + 1, cells[1])
        })?;
        let p = gsdyn_core::geom::vec3(
            parse(cells[2], "x")?,
            parse(cells[3], "y")?,
            parse(cells[4], "z")?,
        );
        if t == frames.len() && i == 0 {
            frames.push(Vec::new());
        }
        if t + 1 != frames.len() || i != frames[t].len() {
            bail!(
                "{}: line {}: rows must arrive in (frame, point) order",
                path.display(),
                lineno + 1
            );
        }
        frames[t].push(p);
    }
    if frames.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let n = frames[0].len();
    if let Some(t) = frames.iter().position(|f| f.len() != n) {
        bail!("{}: frame {t} has {} points, frame 0 has {n}", path.display(), frames[t].len());
    }
    Ok(frames)
}

fn load_trajectory(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("trk") => Ok(TrackedSequence::load(path)?.positions),
        Some("csv") => read_traj_csv(path),
        _ => bail!("{}: expected a .trk or .csv trajectory", path.display()),
    }
}
