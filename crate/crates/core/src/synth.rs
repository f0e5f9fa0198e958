//! Synthetic tabletop worlds standing in for a real tracking pipeline:
//! mass-spring deformables (rope, cloth, quasi-rigid blob) on a table,
//! manipulated by a scripted pusher or gripper, emitting dense particle
//! tracks plus paired Gaussian clouds.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::gaussians::GaussianCloud;
use crate::geom::{vec3, UnitQuat, Vec3};
use crate::records;
use crate::{Error, Result};

const TRACK_MAGIC: &[u8; 4] = b"GTRK";
const TRACK_VERSION: u32 = 1;

const GRAVITY: f64 = 9.81;
const PARTICLE_MASS: f64 = 0.02;
const PUSHER_RADIUS: f64 = 0.02;
const PUSHER_HEIGHT: f64 = 0.15;
const GRASP_RADIUS: f64 = 0.035;
/// A particle travelling further than this between output frames means the
/// integrator has blown up.
const FRAME_DISPLACEMENT_LIMIT: f64 = 0.1;
/// Scripts must move the effector less than this per frame.
const SCRIPT_STEP_LIMIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EffectorKind {
    Pusher,
    Gripper,
}

impl EffectorKind {
    pub fn as_u8(self) -> u8 {
        match self {
            EffectorKind::Pusher => 0,
            EffectorKind::Gripper => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<EffectorKind> {
        match v {
            0 => Ok(EffectorKind::Pusher),
            1 => Ok(EffectorKind::Gripper),
            other => Err(Error::format(format!("unknown effector kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EffectorKind::Pusher => "pusher",
            EffectorKind::Gripper => "gripper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectKind {
    Rope { length: f64, particles: usize },
    Cloth { size: (f64, f64), grid: (usize, usize) },
    Blob { radii: Vec3, particles: usize, connect_radius: f64 },
}

impl ObjectKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectKind::Rope { .. } => "rope",
            ObjectKind::Cloth { .. } => "cloth",
            ObjectKind::Blob { .. } => "blob",
        }
    }

    pub fn particle_count(&self) -> usize {
        match self {
            ObjectKind::Rope { particles, .. } => *particles,
            ObjectKind::Cloth { grid, .. } => grid.0 * grid.1,
            ObjectKind::Blob { particles, .. } => *particles,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub object: ObjectKind,
    pub effector: EffectorKind,
    pub stiffness: f64,
    pub damping: f64,
    pub friction: f64,
    /// Integrator substep in seconds.
    pub timestep: f64,
    /// Output frame rate.
    pub fps: f64,
    pub table_height: f64,
    /// Output frames per episode.
    pub frames: usize,
    /// AABB the effector is scripted within.
    pub workspace: (Vec3, Vec3),
    pub rng_seed: u64,
}

impl WorldConfig {
    fn defaults(object: ObjectKind, effector: EffectorKind) -> WorldConfig {
        WorldConfig {
            object,
            effector,
            stiffness: 2000.0,
            damping: 6.0,
            friction: 0.5,
            timestep: 1e-3,
            fps: 15.0,
            table_height: 0.0,
            frames: 150,
            workspace: (vec3(-0.45, -0.45, 0.0), vec3(0.45, 0.45, 0.35)),
            rng_seed: 0,
        }
    }

    pub fn rope() -> WorldConfig {
        Self::defaults(ObjectKind::Rope { length: 0.5, particles: 64 }, EffectorKind::Gripper)
    }

    pub fn cloth() -> WorldConfig {
        Self::defaults(
            ObjectKind::Cloth { size: (0.3, 0.3), grid: (8, 8) },
            EffectorKind::Pusher,
        )
    }

    pub fn blob() -> WorldConfig {
        Self::defaults(
            ObjectKind::Blob {
                radii: vec3(0.06, 0.06, 0.05),
                particles: 64,
                connect_radius: 0.05,
            },
            EffectorKind::Gripper,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timestep > 0.0) {
            return Err(Error::invalid("world config: timestep must be > 0"));
        }
        if !(self.stiffness > 0.0) {
            return Err(Error::invalid("world config: stiffness must be > 0"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("world config: fps must be > 0"));
        }
        if self.object.particle_count() < 2 {
            return Err(Error::invalid("world config: at least 2 particles required"));
        }
        if let ObjectKind::Cloth { grid, .. } = self.object {
            if grid.0 < 2 || grid.1 < 2 {
                return Err(Error::invalid("world config: cloth grid must be at least 2x2"));
            }
        }
        if self.frames < 2 {
            return Err(Error::invalid("world config: at least 2 frames required"));
        }
        let (lo, hi) = self.workspace;
        if !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) {
            return Err(Error::invalid("world config: degenerate workspace box"));
        }
        Ok(())
    }

    fn substeps_per_frame(&self) -> usize {
        (((1.0 / self.fps) / self.timestep).round() as usize).max(1)
    }
}

/// Scripted effector motion: one waypoint per output frame, plus an optional
/// gripper hold window [start, end) in frame indices (offsets freeze at
/// frame `start`; the segment leaving frame `end - 1` is already free).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionScript {
    pub waypoints: Vec<Vec3>,
    pub grasp: Option<(usize, usize)>,
}

/// Dense particle tracks with the actions that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedSequence {
    /// T frames of N particle positions.
    pub positions: Vec<Vec<Vec3>>,
    /// Effector position per frame.
    pub actions: Vec<Vec3>,
    pub effector_kind: EffectorKind,
    /// True where the particle is kinematically held by the gripper.
    pub grasp_mask: Vec<Vec<bool>>,
    pub fps: f64,
    pub table_height: f64,
}

impl TrackedSequence {
    pub fn num_frames(&self) -> usize {
        self.positions.len()
    }

    pub fn num_particles(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.positions.len();
        if t < 2 {
            return Err(Error::invalid("tracked sequence: need at least 2 frames"));
        }
        let n = self.positions[0].len();
        if n == 0 {
            return Err(Error::invalid("tracked sequence: no particles"));
        }
        if self.actions.len() != t || self.grasp_mask.len() != t {
            return Err(Error::shape(format!(
                "tracked sequence: {} frames but {} actions / {} mask rows",
                t,
                self.actions.len(),
                self.grasp_mask.len()
            )));
        }
        for (ti, frame) in self.positions.iter().enumerate() {
            if frame.len() != n || self.grasp_mask[ti].len() != n {
                return Err(Error::shape(format!(
                    "tracked sequence: frame {ti} particle count differs"
                )));
            }
            for (i, p) in frame.iter().enumerate() {
                if !p.is_finite() {
                    return Err(Error::numeric(format!(
                        "tracked sequence: non-finite particle {i} at frame {ti}"
                    )));
                }
                if p.z < self.table_height - 1e-6 {
                    return Err(Error::numeric(format!(
                        "tracked sequence: particle {i} below table at frame {ti}"
                    )));
                }
            }
            if ti > 0 {
                for (a, b) in frame.iter().zip(&self.positions[ti - 1]) {
                    if a.dist(*b) >= FRAME_DISPLACEMENT_LIMIT {
                        return Err(Error::numeric(format!(
                            "tracked sequence: displacement jump at frame {ti}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let t = self.num_frames();
        let n = self.num_particles();
        let mut w = records::create(path)?;
        records::write_magic(&mut w, TRACK_MAGIC, TRACK_VERSION)?;
        records::write_u64(&mut w, t as u64)?;
        records::write_u64(&mut w, n as u64)?;
        w.write_all(&[self.effector_kind.as_u8()])
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        records::write_f64(&mut w, self.fps)?;
        records::write_f64(&mut w, self.table_height)?;
        let mut flat = Vec::with_capacity(t * n * 3);
        for frame in &self.positions {
            for p in frame {
                flat.extend_from_slice(&p.to_array());
            }
        }
        records::write_f64s(&mut w, &flat)?;
        let mut acts = Vec::with_capacity(t * 3);
        for a in &self.actions {
            acts.extend_from_slice(&a.to_array());
        }
        records::write_f64s(&mut w, &acts)?;
        let mask: Vec<bool> = self.grasp_mask.iter().flatten().copied().collect();
        records::write_bools(&mut w, &mask)?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<TrackedSequence> {
        let mut r = records::open(path)?;
        records::expect_magic(&mut r, TRACK_MAGIC, TRACK_VERSION, "tracked sequence")?;
        let t = records::read_count(&mut r, "frame count", 10_000_000)?;
        let n = records::read_count(&mut r, "particle count", 10_000_000)?;
        let mut kind = [0u8; 1];
        std::io::Read::read_exact(&mut r, &mut kind)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let effector_kind = EffectorKind::from_u8(kind[0])?;
        let fps = records::read_f64(&mut r)?;
        let table_height = records::read_f64(&mut r)?;
        let flat = records::read_f64s(&mut r, t * n * 3)?;
        let positions: Vec<Vec<Vec3>> = (0..t)
            .map(|ti| {
                (0..n)
                    .map(|i| {
                        let off = (ti * n + i) * 3;
                        vec3(flat[off], flat[off + 1], flat[off + 2])
                    })
                    .collect()
            })
            .collect();
        let acts = records::read_f64s(&mut r, t * 3)?;
        let actions =
            (0..t).map(|ti| vec3(acts[ti * 3], acts[ti * 3 + 1], acts[ti * 3 + 2])).collect();
        let mask_flat = records::read_bools(&mut r, t * n)?;
        let grasp_mask = (0..t).map(|ti| mask_flat[ti * n..(ti + 1) * n].to_vec()).collect();
        let seq =
            TrackedSequence { positions, actions, effector_kind, grasp_mask, fps, table_height };
        seq.validate().map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Ok(seq)
    }
}

struct Spring {
    a: usize,
    b: usize,
    rest: f64,
    k: f64,
}

/// Canonical initial particle layout for an object resting on the table.
pub fn initial_positions(config: &WorldConfig) -> Vec<Vec3> {
    let z0 = config.table_height;
    match &config.object {
        ObjectKind::Rope { length, particles } => {
            let n = *particles;
            (0..n)
                .map(|i| vec3(-length / 2.0 + length * i as f64 / (n - 1) as f64, 0.0, z0))
                .collect()
        }
        ObjectKind::Cloth { size, grid } => {
            let (gx, gy) = *grid;
            let mut pts = Vec::with_capacity(gx * gy);
            for iy in 0..gy {
                for ix in 0..gx {
                    pts.push(vec3(
                        -size.0 / 2.0 + size.0 * ix as f64 / (gx - 1) as f64,
                        -size.1 / 2.0 + size.1 * iy as f64 / (gy - 1) as f64,
                        z0,
                    ));
                }
            }
            pts
        }
        ObjectKind::Blob { radii, particles, .. } => {
            // Fibonacci sphere scaled to the ellipsoid, resting on the table.
            let n = *particles;
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    vec3(
                        radii.x * r * th.cos(),
                        radii.y * r * th.sin(),
                        z0 + radii.z + radii.z * z,
                    )
                })
                .collect()
        }
    }
}

fn build_springs(config: &WorldConfig, positions: &[Vec3]) -> Vec<Spring> {
    let k = config.stiffness;
    let mut springs = Vec::new();
    let push = |a: usize, b: usize, k: f64, springs: &mut Vec<Spring>| {
        springs.push(Spring { a, b, rest: positions[a].dist(positions[b]), k });
    };
    match &config.object {
        ObjectKind::Rope { particles, .. } => {
            let n = *particles;
            for i in 0..n - 1 {
                push(i, i + 1, k, &mut springs);
            }
            for i in 0..n.saturating_sub(2) {
                push(i, i + 2, k * 0.5, &mut springs);
            }
        }
        ObjectKind::Cloth { grid, .. } => {
            let (gx, gy) = *grid;
            let at = |ix: usize, iy: usize| iy * gx + ix;
            for iy in 0..gy {
                for ix in 0..gx {
                    if ix + 1 < gx {
                        push(at(ix, iy), at(ix + 1, iy), k, &mut springs);
                    }
                    if iy + 1 < gy {
                        push(at(ix, iy), at(ix, iy + 1), k, &mut springs);
                    }
                    if ix + 1 < gx && iy + 1 < gy {
                        push(at(ix, iy), at(ix + 1, iy + 1), k * 0.5, &mut springs);
                        push(at(ix + 1, iy), at(ix, iy + 1), k * 0.5, &mut springs);
                    }
                    if ix + 2 < gx {
                        push(at(ix, iy), at(ix + 2, iy), k * 0.25, &mut springs);
                    }
                    if iy + 2 < gy {
                        push(at(ix, iy), at(ix, iy + 2), k * 0.25, &mut springs);
                    }
                }
            }
        }
        ObjectKind::Blob { particles, connect_radius, .. } => {
            let n = *particles;
            let r2 = connect_radius * connect_radius;
            for a in 0..n {
                for b in a + 1..n {
                    if positions[a].dist_sq(positions[b]) <= r2 {
                        push(a, b, k * 1.5, &mut springs);
                    }
                }
            }
        }
    }
    springs
}

struct GraspState {
    indices: Vec<usize>,
    offsets: Vec<Vec3>,
}

/// Incrementally steppable world: one `step_to` call advances a full output
/// frame (all integrator substeps) while the effector moves linearly to the
/// given waypoint.
pub struct SynthWorld {
    config: WorldConfig,
    positions: Vec<Vec3>,
    velocities: Vec<Vec3>,
    springs: Vec<Spring>,
    effector: Vec3,
    grasp: Option<GraspState>,
}

impl SynthWorld {
    pub fn new(config: &WorldConfig, effector_start: Vec3) -> Result<SynthWorld> {
        config.validate()?;
        let positions = initial_positions(config);
        let springs = build_springs(config, &positions);
        if springs.is_empty() {
            return Err(Error::invalid("world: object has no springs (check connect radius)"));
        }
        Ok(SynthWorld {
            config: config.clone(),
            velocities: vec![Vec3::ZERO; positions.len()],
            positions,
            springs,
            effector: effector_start,
            grasp: None,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn effector(&self) -> Vec3 {
        self.effector
    }

    pub fn grasp_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.positions.len()];
        if let Some(g) = &self.grasp {
            for &i in &g.indices {
                mask[i] = true;
            }
        }
        mask
    }

    /// Freezes grasp offsets for particles within reach of the effector (and
    /// not below it, so held particles can never be dragged under the table).
    /// Grasped positions are re-assigned as effector + offset immediately, so
    /// the hold constraint is exact from this instant on. Returns the number
    /// of particles held.
    pub fn begin_grasp(&mut self) -> usize {
        if self.config.effector != EffectorKind::Gripper {
            return 0;
        }
        let mut indices = Vec::new();
        let mut offsets = Vec::new();
        for (i, p) in self.positions.iter().enumerate() {
            if p.dist(self.effector) <= GRASP_RADIUS && p.z >= self.effector.z - 1e-9 {
                indices.push(i);
                offsets.push(*p - self.effector);
            }
        }
        for (&i, &off) in indices.iter().zip(&offsets) {
            self.positions[i] = self.effector + off;
            self.velocities[i] = Vec3::ZERO;
        }
        let held = indices.len();
        if held > 0 {
            self.grasp = Some(GraspState { indices, offsets });
        } else {
            log::debug!("begin_grasp: nothing within reach of the effector");
        }
        held
    }

    pub fn release_grasp(&mut self) {
        self.grasp = None;
    }

    /// Advances one output frame, moving the effector linearly to `target`
    /// (the final substep lands on it exactly).
    pub fn step_to(&mut self, target: Vec3) -> Result<()> {
        if !target.is_finite() {
            return Err(Error::numeric("step_to: non-finite effector target"));
        }
        let before = self.positions.clone();
        let substeps = self.config.substeps_per_frame();
        let start = self.effector;
        let dt = self.config.timestep;
        let table = self.config.table_height;
        let n = self.positions.len();
        let held = self.grasp_mask();
        let mut forces = vec![Vec3::ZERO; n];
        for s in 1..=substeps {
            let eff_prev = self.effector;
            self.effector = if s == substeps {
                target
            } else {
                start + (target - start) * (s as f64 / substeps as f64)
            };
            let eff_vel = (self.effector - eff_prev) / dt;

            for f in forces.iter_mut() {
                *f = vec3(0.0, 0.0, -PARTICLE_MASS * GRAVITY);
            }
            for sp in &self.springs {
                let d = self.positions[sp.b] - self.positions[sp.a];
                let len = d.norm();
                if len > 1e-12 {
                    let f = d * (sp.k * (len - sp.rest) / len);
                    forces[sp.a] += f;
                    forces[sp.b] -= f;
                }
            }
            for i in 0..n {
                forces[i] -= self.velocities[i] * (PARTICLE_MASS * self.config.damping);
            }
            if self.config.effector == EffectorKind::Pusher {
                for i in 0..n {
                    let p = self.positions[i];
                    let dz = (p.z - self.effector.z).clamp(0.0, PUSHER_HEIGHT);
                    let axis = vec3(self.effector.x, self.effector.y, self.effector.z + dz);
                    let d = p - axis;
                    let dist = d.norm();
                    if dist < PUSHER_RADIUS {
                        let n_hat = if dist > 1e-12 { d / dist } else { vec3(1.0, 0.0, 0.0) };
                        forces[i] += n_hat * (2.0 * self.config.stiffness * (PUSHER_RADIUS - dist));
                    }
                }
            }

            for i in 0..n {
                if held[i] {
                    continue;
                }
                self.velocities[i] += forces[i] * (dt / PARTICLE_MASS);
                self.positions[i] += self.velocities[i] * dt;
                if self.positions[i].z < table {
                    self.positions[i].z = table;
                    let v = &mut self.velocities[i];
                    if v.z < 0.0 {
                        v.z = 0.0;
                    }
                    // Coulomb friction against the table: the normal impulse
                    // this substep bounds the tangential velocity change.
                    let vt = vec3(v.x, v.y, 0.0);
                    let speed = vt.norm();
                    if speed > 0.0 {
                        let scale = (1.0 - self.config.friction * GRAVITY * dt / speed).max(0.0);
                        v.x *= scale;
                        v.y *= scale;
                    }
                }
            }
            if let Some(g) = &self.grasp {
                for (&i, &off) in g.indices.iter().zip(&g.offsets) {
                    self.positions[i] = self.effector + off;
                    self.velocities[i] = eff_vel;
                }
            }
        }

        for (i, (a, b)) in self.positions.iter().zip(&before).enumerate() {
            if !a.is_finite() || a.dist(*b) >= FRAME_DISPLACEMENT_LIMIT {
                return Err(Error::numeric(format!(
                    "simulation exploded: particle {i} moved {:.3} m in one frame; \
                     use a smaller timestep or lower stiffness",
                    a.dist(*b)
                )));
            }
        }
        Ok(())
    }
}

/// Runs a full scripted episode. Frame 0 is the initial state with the
/// effector at the first waypoint.
pub fn simulate(config: &WorldConfig, script: &ActionScript) -> Result<TrackedSequence> {
    config.validate()?;
    let t_len = script.waypoints.len();
    if t_len < 2 {
        return Err(Error::invalid("simulate: script needs at least 2 waypoints"));
    }
    for (t, pair) in script.waypoints.windows(2).enumerate() {
        let step = pair[0].dist(pair[1]);
        if !(step < SCRIPT_STEP_LIMIT) {
            return Err(Error::invalid(format!(
                "simulate: script step {step:.3} m at frame {t} exceeds the {SCRIPT_STEP_LIMIT} m limit"
            )));
        }
    }
    if let Some((s, e)) = script.grasp {
        if config.effector != EffectorKind::Gripper {
            return Err(Error::invalid("simulate: grasp window requires a gripper effector"));
        }
        if s >= e || e > t_len {
            return Err(Error::invalid(format!("simulate: bad grasp window {s}..{e}")));
        }
    }

    let mut world = SynthWorld::new(config, script.waypoints[0])?;
    let mut positions = Vec::with_capacity(t_len);
    let mut grasp_mask = Vec::with_capacity(t_len);
    for (t, wp) in script.waypoints.iter().enumerate() {
        if t > 0 {
            world.step_to(*wp)?;
        }
        if let Some((s, e)) = script.grasp {
            if t == s {
                world.begin_grasp();
            }
            if t + 1 == e {
                // Captured below with the mask still set; the segment leaving
                // this frame integrates freely.
                positions.push(world.positions().to_vec());
                grasp_mask.push(world.grasp_mask());
                world.release_grasp();
                continue;
            }
        }
        positions.push(world.positions().to_vec());
        grasp_mask.push(world.grasp_mask());
    }

    let seq = TrackedSequence {
        positions,
        actions: script.waypoints.clone(),
        effector_kind: config.effector,
        grasp_mask,
        fps: config.fps,
        table_height: config.table_height,
    };
    seq.validate()?;
    Ok(seq)
}

fn clamp_to(ws: (Vec3, Vec3), p: Vec3) -> Vec3 {
    p.clamp_box(ws.0, ws.1)
}

/// Appends waypoints walking from the current last point toward `target` in
/// steps of at most `step`, ending exactly on it.
fn walk_to(waypoints: &mut Vec<Vec3>, target: Vec3, step: f64) {
    loop {
        let cur = *waypoints.last().expect("walk_to needs a start point");
        let d = target - cur;
        let dist = d.norm();
        if dist <= step {
            waypoints.push(target);
            return;
        }
        waypoints.push(cur + d * (step / dist));
    }
}

/// Particle indices a gripper script may aim for.
fn grasp_candidates(config: &WorldConfig, positions: &[Vec3]) -> Vec<usize> {
    match &config.object {
        ObjectKind::Rope { particles, .. } => vec![0, particles - 1],
        ObjectKind::Cloth { grid, .. } => {
            let (gx, gy) = *grid;
            vec![0, gx - 1, (gy - 1) * gx, gy * gx - 1]
        }
        ObjectKind::Blob { .. } => {
            let top = positions
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.z.total_cmp(&b.1.z).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            vec![top]
        }
    }
}

/// Random manipulation script: push sweeps through the object for a pusher,
/// or an approach / grasp / drag / release arc for a gripper. Deterministic
/// per seed; waypoints stay inside the workspace with steps under the
/// script limit.
pub fn sample_action_script(config: &WorldConfig, rng_seed: u64) -> Result<ActionScript> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let t_len = config.frames;
    let init = initial_positions(config);
    let center = crate::geom::centroid(&init);
    let ws = config.workspace;
    let table = config.table_height;

    let mut waypoints: Vec<Vec3> = Vec::with_capacity(t_len);
    let mut grasp = None;
    match config.effector {
        EffectorKind::Pusher => {
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            waypoints.push(clamp_to(ws, center + vec3(0.35 * th.cos(), 0.35 * th.sin(), 0.0)));
            let sweeps = rng.random_range(2..=3);
            for _ in 0..sweeps {
                let jitter = vec3(
                    (rng.random::<f64>() - 0.5) * 0.2,
                    (rng.random::<f64>() - 0.5) * 0.2,
                    0.0,
                );
                let through = *waypoints.last().expect("non-empty")
                    + (center + jitter - *waypoints.last().expect("non-empty")) * 1.6;
                walk_to(&mut waypoints, clamp_to(ws, vec3(through.x, through.y, table)), 0.02);
            }
        }
        EffectorKind::Gripper => {
            let candidates = grasp_candidates(config, &init);
            let target = init[candidates[rng.random_range(0..candidates.len())]];
            waypoints.push(clamp_to(ws, target + vec3(0.0, 0.0, 0.1)));
            walk_to(&mut waypoints, target, 0.025);
            waypoints.push(target);
            waypoints.push(target);
            let start = waypoints.len() - 1;

            // Keep the grasp active for most of the episode: wander between
            // random waypoints at drag height, with occasional short holds,
            // leaving just enough tail to lower, release and retreat. Idle
            // frames teach the model nothing about contact dynamics.
            let margin = vec3(0.05, 0.05, 0.0);
            let drag_ws = (ws.0 + margin, ws.1 - margin);
            let lift = target.z + 0.015;
            let tail = 12 + rng.random_range(0..6);
            let budget = t_len.saturating_sub(tail).max(start + 2);
            while waypoints.len() < budget {
                let here = *waypoints.last().expect("non-empty");
                let th = rng.random::<f64>() * std::f64::consts::TAU;
                let dist = 0.08 + rng.random::<f64>() * 0.17;
                let dest = clamp_to(
                    drag_ws,
                    vec3(here.x + dist * th.cos(), here.y + dist * th.sin(), lift),
                );
                walk_to(&mut waypoints, dest, 0.02);
                if rng.random::<f64>() < 0.2 {
                    let hold = rng.random_range(2..=5);
                    let last = *waypoints.last().expect("non-empty");
                    for _ in 0..hold {
                        waypoints.push(last);
                    }
                }
            }
            waypoints.truncate(budget);
            let here = *waypoints.last().expect("non-empty");
            walk_to(&mut waypoints, vec3(here.x, here.y, table), 0.02);
            waypoints.push(*waypoints.last().expect("non-empty"));
            let end = waypoints.len();
            let here = *waypoints.last().expect("non-empty");
            walk_to(&mut waypoints, clamp_to(ws, here + vec3(0.0, 0.0, 0.12)), 0.03);
            if end > start && end <= t_len && start + 1 < t_len {
                grasp = Some((start, end.min(t_len)));
            }
        }
    }

    match waypoints.len().cmp(&t_len) {
        std::cmp::Ordering::Less => {
            let last = *waypoints.last().expect("non-empty");
            waypoints.resize(t_len, last);
        }
        std::cmp::Ordering::Greater => {
            waypoints.truncate(t_len);
            if let Some((s, e)) = grasp {
                grasp = if s + 1 < t_len { Some((s, e.min(t_len))) } else { None };
            }
        }
        std::cmp::Ordering::Equal => {}
    }
    Ok(ActionScript { waypoints, grasp })
}

/// Palette for per-particle Gaussian colors, cycled by index.
const PALETTE: [[f64; 3]; 8] = [
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [1.000, 0.498, 0.000],
    [0.596, 0.306, 0.639],
    [1.000, 1.000, 0.200],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
];

/// One Gaussian per particle: palette colors, isotropic scale at half the
/// mean nearest-neighbor spacing.
pub fn initial_cloud(positions: &[Vec3]) -> Result<GaussianCloud> {
    if positions.len() < 2 {
        return Err(Error::invalid("initial_cloud: need at least 2 particles"));
    }
    let mut nn_sum = 0.0;
    for (i, p) in positions.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in positions.iter().enumerate() {
            if i != j {
                best = best.min(p.dist(*q));
            }
        }
        nn_sum += best;
    }
    let scale = (0.5 * nn_sum / positions.len() as f64).max(1e-6);
    Ok(GaussianCloud {
        centers: positions.to_vec(),
        rotations: vec![UnitQuat::IDENTITY; positions.len()],
        scales: vec![vec3(scale, scale, scale); positions.len()],
        colors: positions
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let c = PALETTE[i % PALETTE.len()];
                vec3(c[0], c[1], c[2])
            })
            .collect(),
        opacities: vec![0.85; positions.len()],
    })
}

pub struct Episode {
    pub sequence: TrackedSequence,
    pub cloud: GaussianCloud,
}

pub struct Dataset {
    pub config: WorldConfig,
    pub rng_seed: u64,
    pub episodes: Vec<Episode>,
}

fn episode_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("ep_{index:04}.trk")),
        dir.join(format!("ep_{index:04}.gcloud")),
    )
}

/// Simulates `num_episodes` scripted episodes (per-episode script seed =
/// `rng_seed` + index) and writes them under `out_path` next to a manifest
/// and one initial Gaussian cloud per episode.
pub fn make_dataset(
    config: &WorldConfig,
    num_episodes: usize,
    rng_seed: u64,
    out_path: &Path,
) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out_path)
        .map_err(|e| Error::io(out_path.display().to_string(), e))?;

    let episodes: Vec<(TrackedSequence, GaussianCloud)> = (0..num_episodes)
        .into_par_iter()
        .map(|i| {
            let script = sample_action_script(config, rng_seed.wrapping_add(i as u64))?;
            let seq = simulate(config, &script)?;
            let cloud = initial_cloud(&seq.positions[0])?;
            Ok((seq, cloud))
        })
        .collect::<Result<_>>()?;

    let mut manifest = String::new();
    manifest.push_str("format = 1\n");
    for (k, v) in config_manifest_entries(config) {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    manifest.push_str(&format!("dataset_seed = {rng_seed}\n"));
    manifest.push_str(&format!("episodes = {num_episodes}\n"));
    let manifest_path = out_path.join("manifest.txt");
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    for (i, (seq, cloud)) in episodes.iter().enumerate() {
        let (trk, gcl) = episode_paths(out_path, i);
        seq.save(&trk)?;
        cloud.save(&gcl)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut kv = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(format!("{}: line {}: expected key = value", manifest_path.display(), lineno + 1))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let config = config_from_manifest(&kv)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    let rng_seed: u64 = parse_kv(&kv, "dataset_seed")?;
    let count: usize = parse_kv(&kv, "episodes")?;
    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let (trk, gcl) = episode_paths(path, i);
        episodes.push(Episode {
            sequence: TrackedSequence::load(&trk)?,
            cloud: GaussianCloud::load(&gcl)?,
        });
    }
    Ok(Dataset { config, rng_seed, episodes })
}

fn parse_kv<T: std::str::FromStr>(
    kv: &std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    let raw = kv.get(key).ok_or_else(|| Error::format(format!("manifest missing key {key}")))?;
    raw.parse().map_err(|_| Error::format(format!("manifest key {key}: bad value {raw}")))
}

fn config_manifest_entries(config: &WorldConfig) -> Vec<(String, String)> {
    let mut out = vec![("object".to_string(), config.object.name().to_string())];
    match &config.object {
        ObjectKind::Rope { length, particles } => {
            out.push(("rope_length".into(), length.to_string()));
            out.push(("rope_particles".into(), particles.to_string()));
        }
        ObjectKind::Cloth { size, grid } => {
            out.push(("cloth_size_x".into(), size.0.to_string()));
            out.push(("cloth_size_y".into(), size.1.to_string()));
            out.push(("cloth_grid_x".into(), grid.0.to_string()));
            out.push(("cloth_grid_y".into(), grid.1.to_string()));
        }
        ObjectKind::Blob { radii, particles, connect_radius } => {
            out.push(("blob_radius_x".into(), radii.x.to_string()));
            out.push(("blob_radius_y".into(), radii.y.to_string()));
            out.push(("blob_radius_z".into(), radii.z.to_string()));
            out.push(("blob_particles".into(), particles.to_string()));
            out.push(("blob_connect_radius".into(), connect_radius.to_string()));
        }
    }
    out.push(("effector".into(), config.effector.name().into()));
    out.push(("stiffness".into(), config.stiffness.to_string()));
    out.push(("damping".into(), config.damping.to_string()));
    out.push(("friction".into(), config.friction.to_string()));
    out.push(("timestep".into(), config.timestep.to_string()));
    out.push(("fps".into(), config.fps.to_string()));
    out.push(("table_height".into(), config.table_height.to_string()));
    out.push(("frames".into(), config.frames.to_string()));
    for (tag, v) in [("min", config.workspace.0), ("max", config.workspace.1)] {
        out.push((format!("workspace_{tag}_x"), v.x.to_string()));
        out.push((format!("workspace_{tag}_y"), v.y.to_string()));
        out.push((format!("workspace_{tag}_z"), v.z.to_string()));
    }
    out.push(("world_seed".into(), config.rng_seed.to_string()));
    out
}

fn config_from_manifest(kv: &std::collections::BTreeMap<String, String>) -> Result<WorldConfig> {
    let object = match kv.get("object").map(String::as_str) {
        Some("rope") => ObjectKind::Rope {
            length: parse_kv(kv, "rope_length")?,
            particles: parse_kv(kv, "rope_particles")?,
        },
        Some("cloth") => ObjectKind::Cloth {
            size: (parse_kv(kv, "cloth_size_x")?, parse_kv(kv, "cloth_size_y")?),
            grid: (parse_kv(kv, "cloth_grid_x")?, parse_kv(kv, "cloth_grid_y")?),
        },
        Some("blob") => ObjectKind::Blob {
            radii: vec3(
                parse_kv(kv, "blob_radius_x")?,
                parse_kv(kv, "blob_radius_y")?,
                parse_kv(kv, "blob_radius_z")?,
            ),
            particles: parse_kv(kv, "blob_particles")?,
            connect_radius: parse_kv(kv, "blob_connect_radius")?,
        },
        other => return Err(Error::format(format!("manifest object kind {other:?}"))),
    };
    let effector = match kv.get("effector").map(String::as_str) {
        Some("pusher") => EffectorKind::Pusher,
        Some("gripper") => EffectorKind::Gripper,
        other => return Err(Error::format(format!("manifest effector kind {other:?}"))),
    };
    Ok(WorldConfig {
        object,
        effector,
        stiffness: parse_kv(kv, "stiffness")?,
        damping: parse_kv(kv, "damping")?,
        friction: parse_kv(kv, "friction")?,
        timestep: parse_kv(kv, "timestep")?,
        fps: parse_kv(kv, "fps")?,
        table_height: parse_kv(kv, "table_height")?,
        frames: parse_kv(kv, "frames")?,
        workspace: (
            vec3(
                parse_kv(kv, "workspace_min_x")?,
                parse_kv(kv, "workspace_min_y")?,
                parse_kv(kv, "workspace_min_z")?,
            ),
            vec3(
                parse_kv(kv, "workspace_max_x")?,
                parse_kv(kv, "workspace_max_y")?,
                parse_kv(kv, "workspace_max_z")?,
            ),
        ),
        rng_seed: parse_kv(kv, "world_seed")?,
    })
}
