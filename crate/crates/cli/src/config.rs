//! Config file handling. One TOML file carries optional sections for every
//! stage; each command reads the sections it needs, command-line flags win
//! over file values, and anything unset falls back to library defaults.
//! Unknown keys anywhere are an error.

use anyhow::{bail, Context, Result};
use gsdyn_core::geom::{vec3, Vec3};
use gsdyn_core::plan::{CostMode, PlanConfig};
use gsdyn_core::render::CameraModel;
use gsdyn_core::synth::{EffectorKind, ObjectKind, WorldConfig};
use gsdyn_core::train::{Reduction, TrainConfig};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub data: DataSection,
    pub world: WorldSection,
    pub train: TrainSection,
    pub plan: PlanSection,
    pub camera: CameraSection,
    pub target: TargetSection,
    pub prep: PrepSection,
    pub predict: PredictSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub object: Option<String>,
    pub effector: Option<String>,
    pub rope_length: Option<f64>,
    pub rope_particles: Option<usize>,
    pub cloth_size: Option<[f64; 2]>,
    pub cloth_grid: Option<[usize; 2]>,
    pub blob_radii: Option<[f64; 3]>,
    pub blob_particles: Option<usize>,
    pub blob_connect_radius: Option<f64>,
    pub stiffness: Option<f64>,
    pub damping: Option<f64>,
    pub friction: Option<f64>,
    pub timestep: Option<f64>,
    pub fps: Option<f64>,
    pub table_height: Option<f64>,
    pub frames: Option<usize>,
    pub workspace_min: Option<[f64; 3]>,
    pub workspace_max: Option<[f64; 3]>,
    pub seed: Option<u64>,
}

fn as_vec3(a: [f64; 3]) -> Vec3 {
    vec3(a[0], a[1], a[2])
}

impl WorldSection {
    /// `object_flag` beats the file value; both beat the rope preset.
    pub fn build(&self, object_flag: Option<&str>, frames_flag: Option<usize>) -> Result<WorldConfig> {
        let name = object_flag
            .map(str::to_string)
            .or_else(|| self.object.clone())
            .unwrap_or_else(|| "rope".to_string());
        let mut cfg = match name.as_str() {
            "rope" => WorldConfig::rope(),
            "cloth" => WorldConfig::cloth(),
            "blob" => WorldConfig::blob(),
            other => bail!("unknown object kind {other:?} (expected rope, cloth, or blob)"),
        };
        match &mut cfg.object {
            ObjectKind::Rope { length, particles } => {
                if let Some(v) = self.rope_length {
                    *length = v;
                }
                if let Some(v) = self.rope_particles {
                    *particles = v;
                }
                reject_shape_keys(&name, &[
                    ("cloth_size", self.cloth_size.is_some()),
                    ("cloth_grid", self.cloth_grid.is_some()),
                    ("blob_radii", self.blob_radii.is_some()),
                    ("blob_particles", self.blob_particles.is_some()),
                    ("blob_connect_radius", self.blob_connect_radius.is_some()),
                ])?;
            }
            ObjectKind::Cloth { size, grid } => {
                if let Some(v) = self.cloth_size {
                    *size = (v[0], v[1]);
                }
                if let Some(v) = self.cloth_grid {
                    *grid = (v[0], v[1]);
                }
                reject_shape_keys(&name, &[
                    ("rope_length", self.rope_length.is_some()),
                    ("rope_particles", self.rope_particles.is_some()),
                    ("blob_radii", self.blob_radii.is_some()),
                    ("blob_particles", self.blob_particles.is_some()),
                    ("blob_connect_radius", self.blob_connect_radius.is_some()),
                ])?;
            }
            ObjectKind::Blob { radii, particles, connect_radius } => {
                if let Some(v) = self.blob_radii {
                    *radii = as_vec3(v);
                }
                if let Some(v) = self.blob_particles {
                    *particles = v;
                }
                if let Some(v) = self.blob_connect_radius {
                    *connect_radius = v;
                }
                reject_shape_keys(&name, &[
                    ("rope_length", self.rope_length.is_some()),
                    ("rope_particles", self.rope_particles.is_some()),
                    ("cloth_size", self.cloth_size.is_some()),
                    ("cloth_grid", self.cloth_grid.is_some()),
                ])?;
            }
        }
        if let Some(e) = &self.effector {
            cfg.effector = match e.as_str() {
                "gripper" => EffectorKind::Gripper,
                "pusher" => EffectorKind::Pusher,
                other => bail!("unknown effector {other:?} (expected gripper or pusher)"),
            };
        }
        set(&mut cfg.stiffness, self.stiffness);
        set(&mut cfg.damping, self.damping);
        set(&mut cfg.friction, self.friction);
        set(&mut cfg.timestep, self.timestep);
        set(&mut cfg.fps, self.fps);
        set(&mut cfg.table_height, self.table_height);
        set(&mut cfg.frames, frames_flag.or(self.frames));
        if let Some(v) = self.workspace_min {
            cfg.workspace.0 = as_vec3(v);
        }
        if let Some(v) = self.workspace_max {
            cfg.workspace.1 = as_vec3(v);
        }
        set(&mut cfg.rng_seed, self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn reject_shape_keys(object: &str, keys: &[(&str, bool)]) -> Result<()> {
    for (key, present) in keys {
        if *present {
            bail!("config key [world].{key} does not apply to object = {object:?}");
        }
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub tau: Option<usize>,
    pub k: Option<usize>,
    pub p: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub d_v: Option<f64>,
    pub d_e: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub batches_per_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub lambda_edge: Option<f64>,
    pub lambda_rigid: Option<f64>,
    pub rigid: Option<bool>,
    pub reduction: Option<String>,
    pub val_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl TrainSection {
    pub fn build(&self, epochs_flag: Option<usize>, seed_flag: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        set(&mut cfg.tau, self.tau);
        set(&mut cfg.k, self.k);
        set(&mut cfg.p, self.p);
        set(&mut cfg.hidden_dim, self.hidden_dim);
        set(&mut cfg.d_v, self.d_v);
        set(&mut cfg.d_e, self.d_e);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.batches_per_epoch, self.batches_per_epoch);
        set(&mut cfg.epochs, epochs_flag.or(self.epochs));
        set(&mut cfg.lambda_edge, self.lambda_edge);
        set(&mut cfg.lambda_rigid, self.lambda_rigid);
        set(&mut cfg.rigid, self.rigid);
        if let Some(r) = &self.reduction {
            cfg.reduction = match r.as_str() {
                "mean" => Reduction::Mean,
                "sum" => Reduction::Sum,
                other => bail!("unknown reduction {other:?} (expected mean or sum)"),
            };
        }
        set(&mut cfg.val_fraction, self.val_fraction);
        set(&mut cfg.rng_seed, seed_flag.or(self.seed));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub horizon: Option<usize>,
    pub num_samples: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub temperature: Option<f64>,
    pub action_min: Option<[f64; 3]>,
    pub action_max: Option<[f64; 3]>,
    pub max_step: Option<f64>,
    pub mpc_iters: Option<usize>,
    pub cost_mode: Option<String>,
    pub seed: Option<u64>,
    /// MPC steps to execute.
    pub steps: Option<usize>,
    /// Independent planner seeds to run; curves are aggregated by median.
    pub seeds: Option<usize>,
    /// Control-particle selection radius; match the training value.
    pub d_v: Option<f64>,
    pub d_e: Option<f64>,
}

pub struct ResolvedPlan {
    pub cfg: PlanConfig,
    pub steps: usize,
    pub seeds: usize,
    pub d_v: f64,
    pub d_e: f64,
}

impl PlanSection {
    pub fn build(
        &self,
        steps_flag: Option<usize>,
        seeds_flag: Option<usize>,
        seed_flag: Option<u64>,
    ) -> Result<ResolvedPlan> {
        let mut cfg = PlanConfig::default();
        // Command-line targets are plain point sets with no correspondence to
        // the control particles, so the planner scores them by Chamfer unless
        // the file says otherwise.
        cfg.cost_mode = CostMode::Chamfer;
        set(&mut cfg.horizon, self.horizon);
        set(&mut cfg.num_samples, self.num_samples);
        set(&mut cfg.noise_sigma, self.noise_sigma);
        set(&mut cfg.temperature, self.temperature);
        if let Some(v) = self.action_min {
            cfg.action_bounds.0 = as_vec3(v);
        }
        if let Some(v) = self.action_max {
            cfg.action_bounds.1 = as_vec3(v);
        }
        set(&mut cfg.max_step, self.max_step);
        set(&mut cfg.mpc_iters, self.mpc_iters);
        if let Some(m) = &self.cost_mode {
            cfg.cost_mode = match m.as_str() {
                "chamfer" => CostMode::Chamfer,
                "correspondence" => CostMode::Correspondence,
                other => bail!("unknown cost mode {other:?} (expected chamfer or correspondence)"),
            };
        }
        set(&mut cfg.rng_seed, seed_flag.or(self.seed));
        cfg.validate()?;
        let train_defaults = TrainConfig::default();
        Ok(ResolvedPlan {
            cfg,
            steps: steps_flag.or(self.steps).unwrap_or(10),
            seeds: seeds_flag.or(self.seeds).unwrap_or(1),
            d_v: self.d_v.unwrap_or(train_defaults.d_v),
            d_e: self.d_e.unwrap_or(train_defaults.d_e),
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub eye: Option<[f64; 3]>,
    pub target: Option<[f64; 3]>,
    pub up: Option<[f64; 3]>,
    pub focal: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

impl CameraSection {
    pub fn build(&self) -> Result<CameraModel> {
        let eye = self.eye.map(as_vec3).unwrap_or(vec3(0.0, -0.6, 0.45));
        let target = self.target.map(as_vec3).unwrap_or(vec3(0.0, 0.0, 0.05));
        let up = self.up.map(as_vec3).unwrap_or(vec3(0.0, 0.0, 1.0));
        let focal = self.focal.unwrap_or(420.0);
        let width = self.width.unwrap_or(320);
        let height = self.height.unwrap_or(240);
        Ok(CameraModel::look_at(eye, target, up, focal, width, height)?)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    /// "hold" keeps the particles where they are; "line" lays the particle
    /// chain out straight from `anchor` along `direction`.
    pub kind: Option<String>,
    pub anchor: Option<[f64; 3]>,
    pub direction: Option<[f64; 3]>,
}

pub enum TargetSpec {
    Hold,
    Line { anchor: Option<Vec3>, direction: Vec3 },
}

impl TargetSection {
    pub fn build(&self) -> Result<TargetSpec> {
        match self.kind.as_deref().unwrap_or("hold") {
            "hold" => Ok(TargetSpec::Hold),
            "line" => Ok(TargetSpec::Line {
                anchor: self.anchor.map(as_vec3),
                direction: self.direction.map(as_vec3).unwrap_or(vec3(1.0, 0.0, 0.0)),
            }),
            other => bail!("unknown target kind {other:?} (expected hold or line)"),
        }
    }
}

/// Scripted effector motion executed before planning starts, for setting up
/// scenarios the world does not start in (a bent rope, a displaced blob).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepSection {
    /// Effector spawn position; also the grasp point when `grasp` is set.
    pub start: Option<[f64; 3]>,
    pub grasp: Option<bool>,
    pub waypoints: Option<Vec<[f64; 3]>>,
}

pub struct ResolvedPrep {
    pub start: Vec3,
    pub grasp: bool,
    pub waypoints: Vec<Vec3>,
}

impl PrepSection {
    pub fn build(&self) -> ResolvedPrep {
        ResolvedPrep {
            start: self.start.map(as_vec3).unwrap_or(vec3(0.0, 0.0, 0.1)),
            grasp: self.grasp.unwrap_or(false),
            waypoints: self
                .waypoints
                .as_deref()
                .unwrap_or(&[])
                .iter()
                .copied()
                .map(as_vec3)
                .collect(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub densify_radius: Option<f64>,
    pub densify_top_k: Option<usize>,
}

/// Deterministic key = value echo of resolved settings, grouped in TOML-style
/// sections. Paths and timings stay out so reruns produce identical bytes.
pub struct ManifestEcho {
    text: String,
}

impl ManifestEcho {
    pub fn new(command: &str) -> ManifestEcho {
        ManifestEcho { text: format!("command = {command}\n") }
    }

    pub fn section(&mut self, name: &str, entries: &[(&str, String)]) -> &mut Self {
        self.text.push_str(&format!("\n[{name}]\n"));
        for (k, v) in entries {
            self.text.push_str(&format!("{k} = {v}\n"));
        }
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text)
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

pub fn vec3_entry(v: Vec3) -> String {
    format!("[{}, {}, {}]", v.x, v.y, v.z)
}

pub fn world_entries(cfg: &WorldConfig) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = vec![("object", cfg.object.name().to_string())];
    match &cfg.object {
        ObjectKind::Rope { length, particles } => {
            out.push(("rope_length", length.to_string()));
            out.push(("rope_particles", particles.to_string()));
        }
        ObjectKind::Cloth { size, grid } => {
            out.push(("cloth_size", format!("[{}, {}]", size.0, size.1)));
            out.push(("cloth_grid", format!("[{}, {}]", grid.0, grid.1)));
        }
        ObjectKind::Blob { radii, particles, connect_radius } => {
            out.push(("blob_radii", vec3_entry(*radii)));
            out.push(("blob_particles", particles.to_string()));
            out.push(("blob_connect_radius", connect_radius.to_string()));
        }
    }
    out.push(("effector", cfg.effector.name().to_string()));
    out.push(("stiffness", cfg.stiffness.to_string()));
    out.push(("damping", cfg.damping.to_string()));
    out.push(("friction", cfg.friction.to_string()));
    out.push(("timestep", cfg.timestep.to_string()));
    out.push(("fps", cfg.fps.to_string()));
    out.push(("table_height", cfg.table_height.to_string()));
    out.push(("frames", cfg.frames.to_string()));
    out.push(("workspace_min", vec3_entry(cfg.workspace.0)));
    out.push(("workspace_max", vec3_entry(cfg.workspace.1)));
    out.push(("seed", cfg.rng_seed.to_string()));
    out
}

pub fn train_entries(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("tau", cfg.tau.to_string()),
        ("k", cfg.k.to_string()),
        ("p", cfg.p.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("d_v", cfg.d_v.to_string()),
        ("d_e", cfg.d_e.to_string()),
        ("lr", cfg.lr.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("batches_per_epoch", cfg.batches_per_epoch.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("lambda_edge", cfg.lambda_edge.to_string()),
        ("lambda_rigid", cfg.lambda_rigid.to_string()),
        ("rigid", cfg.rigid.to_string()),
        (
            "reduction",
            match cfg.reduction {
                Reduction::Mean => "mean".to_string(),
                Reduction::Sum => "sum".to_string(),
            },
        ),
        ("val_fraction", cfg.val_fraction.to_string()),
        ("seed", cfg.rng_seed.to_string()),
    ]
}

pub fn plan_entries(plan: &ResolvedPlan) -> Vec<(&'static str, String)> {
    let cfg = &plan.cfg;
    vec![
        ("horizon", cfg.horizon.to_string()),
        ("num_samples", cfg.num_samples.to_string()),
        ("noise_sigma", cfg.noise_sigma.to_string()),
        ("temperature", cfg.temperature.to_string()),
        ("action_min", vec3_entry(cfg.action_bounds.0)),
        ("action_max", vec3_entry(cfg.action_bounds.1)),
        ("max_step", cfg.max_step.to_string()),
        ("mpc_iters", cfg.mpc_iters.to_string()),
        (
            "cost_mode",
            match cfg.cost_mode {
                CostMode::Chamfer => "chamfer".to_string(),
                CostMode::Correspondence => "correspondence".to_string(),
            },
        ),
        ("seed", cfg.rng_seed.to_string()),
        ("steps", plan.steps.to_string()),
        ("seeds", plan.seeds.to_string()),
        ("d_v", plan.d_v.to_string()),
        ("d_e", plan.d_e.to_string()),
    ]
}

pub fn camera_entries(cam: &CameraModel) -> Vec<(&'static str, String)> {
    vec![
        ("fx", cam.fx.to_string()),
        ("fy", cam.fy.to_string()),
        ("cx", cam.cx.to_string()),
        ("cy", cam.cy.to_string()),
        ("width", cam.width.to_string()),
        ("height", cam.height.to_string()),
    ]
}
