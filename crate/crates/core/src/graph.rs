//! Graph dynamics over control vertices: farthest-point-sampled vertices plus
//! the effector, threshold edges, motion-history features, a message-passing
//! network with hand-written reverse-mode gradients, and recurrent rollout.
//!
//! Convention used throughout: at prediction step h the effector vertex is
//! already placed at its commanded position actions[h] while object vertices
//! still sit at the previous frame, so the effector's most recent motion
//! feature is the commanded step. The network output advances the object
//! vertices to meet it.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{farthest_point_sample, vec3, FpsSelect, Vec3};
use crate::records;
use crate::{Error, Result};

pub const EDGE_FEATURE_DIM: usize = 5;

/// 3k motion components + 2-way vertex one-hot + table distance.
pub const fn vertex_feature_dim(k: usize) -> usize {
    3 * k + 3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexKind {
    Object,
    Effector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    ObjObj,
    ObjRobot,
}

/// Directed edge carrying a message from `from` to `to`; graphs always hold
/// both directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug)]
pub struct ControlGraph {
    /// Object vertices first, effector last.
    pub vertex_positions: Vec<Vec3>,
    /// k past frames, oldest first, each the full vertex set.
    pub history: Vec<Vec<Vec3>>,
    pub vertex_kind: Vec<VertexKind>,
    pub edges: Vec<Edge>,
    pub d_v: f64,
    pub d_e: f64,
    pub table_height: f64,
    /// Object vertex -> index into the point set it was sampled from, for
    /// persistent correspondence across re-observations.
    pub source_indices: Vec<usize>,
}

impl ControlGraph {
    pub fn num_vertices(&self) -> usize {
        self.vertex_positions.len()
    }

    pub fn num_object_vertices(&self) -> usize {
        self.vertex_positions.len() - 1
    }

    pub fn effector_position(&self) -> Vec3 {
        *self.vertex_positions.last().expect("graph has an effector vertex")
    }

    pub fn object_positions(&self) -> &[Vec3] {
        &self.vertex_positions[..self.vertex_positions.len() - 1]
    }

    pub fn set_effector(&mut self, pos: Vec3) {
        let last = self.vertex_positions.len() - 1;
        self.vertex_positions[last] = pos;
    }

    /// All-pairs threshold edges over current positions, typed by endpoint
    /// kinds, both directions, deterministic order.
    pub fn rebuild_edges(&mut self) {
        self.edges = threshold_edges(&self.vertex_positions, &self.vertex_kind, self.d_e);
    }

    /// Pushes the given snapshot into history (dropping the oldest frame)
    /// and replaces object positions with `new_object`.
    pub fn advance(&mut self, snapshot: Vec<Vec3>, new_object: &[Vec3]) {
        debug_assert_eq!(snapshot.len(), self.num_vertices());
        debug_assert_eq!(new_object.len(), self.num_object_vertices());
        self.history.rotate_left(1);
        let k = self.history.len();
        self.history[k - 1] = snapshot;
        self.vertex_positions[..new_object.len()].copy_from_slice(new_object);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_positions.len();
        if n < 2 {
            return Err(Error::invalid("control graph: need at least one object vertex plus the effector"));
        }
        if self.vertex_kind.len() != n || self.source_indices.len() != n - 1 {
            return Err(Error::shape("control graph: field lengths disagree"));
        }
        if self.vertex_kind[n - 1] != VertexKind::Effector
            || self.vertex_kind[..n - 1].iter().any(|k| *k != VertexKind::Object)
        {
            return Err(Error::invalid("control graph: expected object vertices then one effector"));
        }
        for row in &self.history {
            if row.len() != n {
                return Err(Error::shape("control graph: history frame has wrong vertex count"));
            }
        }
        for e in &self.edges {
            if e.from == e.to || e.from >= n || e.to >= n {
                return Err(Error::invalid("control graph: bad edge endpoints"));
            }
            if !self.edges.iter().any(|r| r.from == e.to && r.to == e.from) {
                return Err(Error::invalid("control graph: edge missing its reverse"));
            }
        }
        Ok(())
    }
}

fn threshold_edges(positions: &[Vec3], kinds: &[VertexKind], d_e: f64) -> Vec<Edge> {
    let mut edges = Vec::new();
    let d2 = d_e * d_e;
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            if kinds[i] == VertexKind::Effector && kinds[j] == VertexKind::Effector {
                continue;
            }
            if positions[i].dist_sq(positions[j]) <= d2 {
                let kind = if kinds[i] == VertexKind::Effector || kinds[j] == VertexKind::Effector
                {
                    EdgeKind::ObjRobot
                } else {
                    EdgeKind::ObjObj
                };
                edges.push(Edge { from: i, to: j, kind });
                edges.push(Edge { from: j, to: i, kind });
            }
        }
    }
    edges
}

/// Past frames for seeding motion features: `object` rows are indexed like
/// the point set handed to build_graph, `effector` is the effector's own
/// track. Oldest first, newest last (the frame just before now). Missing
/// frames are backfilled by replicating the oldest available position, which
/// makes the corresponding motion features zero.
pub struct HistorySource<'a> {
    pub object: &'a [Vec<Vec3>],
    pub effector: &'a [Vec3],
}

impl HistorySource<'_> {
    pub const STATIC: HistorySource<'static> = HistorySource { object: &[], effector: &[] };
}

pub fn build_graph(
    object_points: &[Vec3],
    effector_pos: Vec3,
    d_v: f64,
    d_e: f64,
    k: usize,
    table_height: f64,
    history: HistorySource,
) -> Result<ControlGraph> {
    if object_points.is_empty() {
        return Err(Error::invalid("build_graph: no object points"));
    }
    if k == 0 {
        return Err(Error::invalid("build_graph: history window k must be >= 1"));
    }
    for frame in history.object {
        if frame.len() != object_points.len() {
            return Err(Error::shape(
                "build_graph: history frames must index like the object points",
            ));
        }
    }
    let indices = farthest_point_sample(object_points, FpsSelect::MinDist(d_v))?;
    let n = indices.len() + 1;

    let mut vertex_positions: Vec<Vec3> =
        indices.iter().map(|&i| object_points[i]).collect();
    vertex_positions.push(effector_pos);
    let mut vertex_kind = vec![VertexKind::Object; n - 1];
    vertex_kind.push(VertexKind::Effector);

    let mut hist = Vec::with_capacity(k);
    for back in (1..=k).rev() {
        let mut frame = Vec::with_capacity(n);
        for &src in &indices {
            frame.push(lookback(history.object, back).map_or(object_points[src], |f| f[src]));
        }
        frame.push(
            lookback(history.effector, back).copied().unwrap_or(effector_pos),
        );
        hist.push(frame);
    }

    let mut graph = ControlGraph {
        vertex_positions,
        history: hist,
        vertex_kind,
        edges: Vec::new(),
        d_v,
        d_e,
        table_height,
        source_indices: indices,
    };
    graph.rebuild_edges();
    Ok(graph)
}

/// Element `back` frames before now, clamped to the oldest available.
fn lookback<T>(frames: &[T], back: usize) -> Option<&T> {
    if frames.is_empty() {
        return None;
    }
    let i = frames.len().saturating_sub(back);
    Some(&frames[i.min(frames.len() - 1)])
}

#[derive(Clone, Debug)]
pub struct FeatureBatch {
    /// n x vertex_feature_dim(k), row-major.
    pub vertex: Vec<f64>,
    /// |E| x EDGE_FEATURE_DIM, row-major, aligned with the edge list.
    pub edge: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

pub fn encode_features(graph: &ControlGraph) -> Result<FeatureBatch> {
    graph.validate()?;
    let n = graph.num_vertices();
    let k = graph.history.len();
    if k == 0 {
        return Err(Error::invalid("encode_features: graph has no history window"));
    }
    let dim = vertex_feature_dim(k);
    let mut vertex = Vec::with_capacity(n * dim);
    for i in 0..n {
        // Motion slots, most recent first: slot j = pos(t-j) - pos(t-j-1).
        let mut newer = graph.vertex_positions[i];
        for j in 0..k {
            let older = graph.history[k - 1 - j][i];
            let m = newer - older;
            vertex.extend_from_slice(&[m.x, m.y, m.z]);
            newer = older;
        }
        match graph.vertex_kind[i] {
            VertexKind::Object => vertex.extend_from_slice(&[1.0, 0.0]),
            VertexKind::Effector => vertex.extend_from_slice(&[0.0, 1.0]),
        }
        vertex.push(graph.vertex_positions[i].z - graph.table_height);
    }
    let mut edge = Vec::with_capacity(graph.edges.len() * EDGE_FEATURE_DIM);
    for e in &graph.edges {
        let d = graph.vertex_positions[e.to] - graph.vertex_positions[e.from];
        edge.extend_from_slice(&[d.x, d.y, d.z]);
        match e.kind {
            EdgeKind::ObjObj => edge.extend_from_slice(&[1.0, 0.0]),
            EdgeKind::ObjRobot => edge.extend_from_slice(&[0.0, 1.0]),
        }
    }
    for v in vertex.iter().chain(edge.iter()) {
        if !v.is_finite() {
            return Err(Error::numeric("encode_features: non-finite feature value"));
        }
    }
    Ok(FeatureBatch { vertex, edge, n, k })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major out_dim x in_dim.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
            .collect();
        Linear { out_dim, in_dim, w, b: vec![0.0; out_dim] }
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Linear {
        Linear { out_dim, in_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        for (row, b) in self.w.chunks_exact(self.in_dim).zip(&self.b) {
            let mut acc = *b;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        let layers = dims.windows(2).map(|w| Linear::random(w[1], w[0], rng)).collect();
        Mlp { layers }
    }

    fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(|l| Linear::zeros(l.out_dim, l.in_dim)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    /// ReLU between layers, linear output.
    fn forward(&self, x: &[f64], trace: Option<&mut MlpApp>) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        let mut app = MlpApp { inputs: Vec::new(), pres: Vec::new() };
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut out);
            if trace.is_some() {
                app.inputs.push(std::mem::take(&mut cur));
                app.pres.push(out.clone());
            }
            if l < last {
                for v in out.iter_mut() {
                    // Not max(0.0): that would map NaN to 0 and hide a
                    // poisoned activation from the finiteness checks.
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut out);
        }
        if let Some(t) = trace {
            *t = app;
        }
        cur
    }

    /// Reverse pass for one recorded application. Accumulates parameter
    /// gradients into `grads` and returns the gradient wrt the input.
    fn backward(&self, app: &MlpApp, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut dz = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (d, pre) in dz.iter_mut().zip(&app.pres[l]) {
                    if *pre <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let input = &app.inputs[l];
            for (o, d) in dz.iter().enumerate() {
                g.b[o] += d;
                let row = &mut g.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, d) in dz.iter().enumerate() {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            dz = prev;
        }
        dz
    }
}

/// Saved activations for one MLP application.
#[derive(Clone, Debug, Default)]
struct MlpApp {
    inputs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynModelParams {
    pub k: usize,
    pub p: usize,
    pub hidden_dim: usize,
    pub vertex_enc: Mlp,
    pub edge_enc: Mlp,
    /// One (message, update) MLP pair per propagation step.
    pub steps: Vec<(Mlp, Mlp)>,
    pub decoder: Mlp,
}

impl DynModelParams {
    pub fn init(k: usize, p: usize, hidden_dim: usize, rng_seed: u64) -> Result<DynModelParams> {
        if k == 0 || p == 0 || hidden_dim == 0 {
            return Err(Error::invalid("model init: k, p, hidden_dim must all be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let h = hidden_dim;
        let vd = vertex_feature_dim(k);
        let mut vertex_enc = Mlp::random(&[vd, h, h, h], &mut rng);
        let mut edge_enc = Mlp::random(&[EDGE_FEATURE_DIM, h, h, h], &mut rng);
        // Balance the encoder inputs. Motion slots carry meters per frame
        // (~0.02) and the table distance a few centimeters, while the type
        // one-hots are O(1); left alone, the first layer's activations are
        // ~99% type signal and the optimizer has to stretch the columns
        // apart before any motion gets through. Folding characteristic
        // scales into the initial columns starts that stretch done.
        let first = &mut vertex_enc.layers[0];
        for r in 0..first.out_dim {
            for c in 0..3 * k {
                first.w[r * first.in_dim + c] *= 20.0;
            }
            first.w[r * first.in_dim + vd - 1] *= 10.0;
        }
        let first = &mut edge_enc.layers[0];
        for r in 0..first.out_dim {
            for c in 0..3 {
                first.w[r * first.in_dim + c] *= 10.0;
            }
        }
        let steps = (0..p)
            .map(|_| {
                (
                    Mlp::random(&[3 * h, h, h, h], &mut rng),
                    Mlp::random(&[2 * h, h, h, h], &mut rng),
                )
            })
            .collect();
        let decoder = Mlp::random(&[h, h, h, 3], &mut rng);
        Ok(DynModelParams { k, p, hidden_dim, vertex_enc, edge_enc, steps, decoder })
    }

    pub fn zeros_like(&self) -> DynModelParams {
        DynModelParams {
            k: self.k,
            p: self.p,
            hidden_dim: self.hidden_dim,
            vertex_enc: self.vertex_enc.zeros_like(),
            edge_enc: self.edge_enc.zeros_like(),
            steps: self
                .steps
                .iter()
                .map(|(m, u)| (m.zeros_like(), u.zeros_like()))
                .collect(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// All MLPs in declaration order; this order defines the flat parameter
    /// layout and the checkpoint layout.
    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.vertex_enc, &self.edge_enc];
        for (m, u) in &self.steps {
            v.push(m);
            v.push(u);
        }
        v.push(&self.decoder);
        v
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.vertex_enc, &mut self.edge_enc];
        for (m, u) in &mut self.steps {
            v.push(m);
            v.push(u);
        }
        v.push(&mut self.decoder);
        v
    }

    pub fn param_count(&self) -> usize {
        self.mlps()
            .iter()
            .flat_map(|m| m.layers.iter())
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for mlp in self.mlps() {
            for l in &mlp.layers {
                out.extend_from_slice(&l.w);
                out.extend_from_slice(&l.b);
            }
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "assign_flat: expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for mlp in self.mlps_mut() {
            for l in &mut mlp.layers {
                let nw = l.w.len();
                l.w.copy_from_slice(&flat[off..off + nw]);
                off += nw;
                let nb = l.b.len();
                l.b.copy_from_slice(&flat[off..off + nb]);
                off += nb;
            }
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        for mlp in self.mlps() {
            for l in &mlp.layers {
                if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::numeric("model parameters contain non-finite values"));
                }
            }
        }
        Ok(())
    }
}

/// Gradients share the parameter container so flattening and Adam reuse the
/// same layout.
pub type DynGrads = DynModelParams;

const MODEL_MAGIC: &[u8; 4] = b"GDYN";
const MODEL_VERSION: u32 = 1;

pub fn save_params(params: &DynModelParams, path: &Path) -> Result<()> {
    params.check_finite()?;
    let mut w = records::create(path)?;
    records::write_magic(&mut w, MODEL_MAGIC, MODEL_VERSION)?;
    records::write_u64(&mut w, params.k as u64)?;
    records::write_u64(&mut w, params.p as u64)?;
    records::write_u64(&mut w, params.hidden_dim as u64)?;
    let linears: Vec<&Linear> =
        params.mlps().iter().flat_map(|m| m.layers.iter()).collect();
    records::write_u64(&mut w, linears.len() as u64)?;
    for l in &linears {
        records::write_u64(&mut w, l.out_dim as u64)?;
        records::write_u64(&mut w, l.in_dim as u64)?;
        records::write_f64s(&mut w, &l.w)?;
        records::write_f64s(&mut w, &l.b)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

    let sidecar = path.with_extension("manifest.txt");
    let text = format!(
        "kind = dynamics model checkpoint\nk = {}\np = {}\nhidden_dim = {}\n\
         vertex_feature_dim = {}\nedge_feature_dim = {}\nlinear_layers = {}\nparameters = {}\n",
        params.k,
        params.p,
        params.hidden_dim,
        vertex_feature_dim(params.k),
        EDGE_FEATURE_DIM,
        linears.len(),
        params.param_count()
    );
    let mut f = std::fs::File::create(&sidecar)
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(sidecar.display().to_string(), e))
}

pub fn load_params(path: &Path) -> Result<DynModelParams> {
    let mut r = records::open(path)?;
    records::expect_magic(&mut r, MODEL_MAGIC, MODEL_VERSION, "model checkpoint")?;
    let k = records::read_count(&mut r, "k", 64)?;
    let p = records::read_count(&mut r, "p", 64)?;
    let hidden = records::read_count(&mut r, "hidden_dim", 65_536)?;
    let mut params = DynModelParams::init(k, p, hidden, 0)?;
    let expect: Vec<(usize, usize)> = params
        .mlps()
        .iter()
        .flat_map(|m| m.layers.iter())
        .map(|l| (l.out_dim, l.in_dim))
        .collect();
    let count = records::read_count(&mut r, "layer count", 4096)?;
    if count != expect.len() {
        return Err(Error::format(format!(
            "{}: checkpoint has {} layers, architecture k={k} p={p} hidden={hidden} needs {}",
            path.display(),
            count,
            expect.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (idx, &(out_dim, in_dim)) in expect.iter().enumerate() {
        let got_out = records::read_count(&mut r, "layer rows", 1 << 20)?;
        let got_in = records::read_count(&mut r, "layer cols", 1 << 20)?;
        if (got_out, got_in) != (out_dim, in_dim) {
            return Err(Error::format(format!(
                "{}: layer {idx} is {got_out}x{got_in}, expected {out_dim}x{in_dim}",
                path.display()
            )));
        }
        let w = records::read_f64s(&mut r, out_dim * in_dim)?;
        let b = records::read_f64s(&mut r, out_dim)?;
        tensors.push((w, b));
    }
    let mut it = tensors.into_iter();
    for mlp in params.mlps_mut() {
        for l in &mut mlp.layers {
            let (w, b) = it.next().expect("tensor count checked above");
            l.w = w;
            l.b = b;
        }
    }
    params.check_finite().map_err(|_| {
        Error::format(format!("{}: checkpoint contains non-finite weights", path.display()))
    })?;
    Ok(params)
}

/// Activations recorded by one forward pass, enough to replay it backwards.
#[derive(Debug, Default)]
pub struct StepTrace {
    vertex_enc: Vec<MlpApp>,
    edge_enc: Vec<MlpApp>,
    /// Per propagation step: one message application per edge, one update
    /// application per vertex.
    prop: Vec<(Vec<MlpApp>, Vec<MlpApp>)>,
    decoder: Vec<MlpApp>,
    object_count: usize,
}

fn check_layer_finite(values: &[Vec<f64>], what: &str) -> Result<()> {
    for row in values {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite activations after {what}")));
        }
    }
    Ok(())
}

fn forward_impl(
    params: &DynModelParams,
    features: &FeatureBatch,
    edges: &[Edge],
    mut trace: Option<&mut StepTrace>,
) -> Result<Vec<Vec3>> {
    let n = features.n;
    let vd = vertex_feature_dim(params.k);
    if features.k != params.k {
        return Err(Error::shape(format!(
            "forward: features built with k={}, model expects k={}",
            features.k, params.k
        )));
    }
    if features.vertex.len() != n * vd {
        return Err(Error::shape("forward: vertex feature buffer has wrong size"));
    }
    if features.edge.len() != edges.len() * EDGE_FEATURE_DIM {
        return Err(Error::shape("forward: edge feature buffer does not match edge list"));
    }
    for e in edges {
        if e.from >= n || e.to >= n {
            return Err(Error::shape("forward: edge endpoint out of range"));
        }
    }
    let h = params.hidden_dim;

    if let Some(t) = trace.as_deref_mut() {
        *t = StepTrace::default();
    }
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let row = &features.vertex[i * vd..(i + 1) * vd];
        let mut app = MlpApp::default();
        let out = params.vertex_enc.forward(row, trace.as_deref_mut().map(|_| &mut app));
        if let Some(t) = trace.as_deref_mut() {
            t.vertex_enc.push(app);
        }
        latents.push(out);
    }
    check_layer_finite(&latents, "vertex encoder")?;

    let mut edge_latents: Vec<Vec<f64>> = Vec::with_capacity(edges.len());
    for (ei, _) in edges.iter().enumerate() {
        let row = &features.edge[ei * EDGE_FEATURE_DIM..(ei + 1) * EDGE_FEATURE_DIM];
        let mut app = MlpApp::default();
        let out = params.edge_enc.forward(row, trace.as_deref_mut().map(|_| &mut app));
        if let Some(t) = trace.as_deref_mut() {
            t.edge_enc.push(app);
        }
        edge_latents.push(out);
    }
    check_layer_finite(&edge_latents, "edge encoder")?;

    let mut msg_input = vec![0.0; 3 * h];
    let mut upd_input = vec![0.0; 2 * h];
    for (s, (msg_mlp, upd_mlp)) in params.steps.iter().enumerate() {
        let mut agg = vec![vec![0.0; h]; n];
        let mut msg_apps = Vec::new();
        for (ei, e) in edges.iter().enumerate() {
            msg_input[..h].copy_from_slice(&latents[e.from]);
            msg_input[h..2 * h].copy_from_slice(&latents[e.to]);
            msg_input[2 * h..].copy_from_slice(&edge_latents[ei]);
            let mut app = MlpApp::default();
            let m = msg_mlp.forward(&msg_input, trace.as_deref_mut().map(|_| &mut app));
            if trace.is_some() {
                msg_apps.push(app);
            }
            for (a, v) in agg[e.to].iter_mut().zip(&m) {
                *a += v;
            }
        }
        check_layer_finite(&agg, &format!("message mlp (propagation step {s})"))?;
        let mut upd_apps = Vec::new();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            upd_input[..h].copy_from_slice(&latents[i]);
            upd_input[h..].copy_from_slice(&agg[i]);
            let mut app = MlpApp::default();
            let out = upd_mlp.forward(&upd_input, trace.as_deref_mut().map(|_| &mut app));
            if trace.is_some() {
                upd_apps.push(app);
            }
            next.push(out);
        }
        check_layer_finite(&next, &format!("update mlp (propagation step {s})"))?;
        if let Some(t) = trace.as_deref_mut() {
            t.prop.push((msg_apps, upd_apps));
        }
        latents = next;
    }

    let mut motions = Vec::with_capacity(n);
    let mut object_count = 0;
    for i in 0..n {
        let is_effector = {
            let row = &features.vertex[i * vd..(i + 1) * vd];
            row[3 * params.k + 1] == 1.0
        };
        if is_effector {
            motions.push(Vec3::ZERO);
            continue;
        }
        object_count += 1;
        let mut app = MlpApp::default();
        let out = params.decoder.forward(&latents[i], trace.as_deref_mut().map(|_| &mut app));
        if let Some(t) = trace.as_deref_mut() {
            t.decoder.push(app);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite activations after decoder"));
        }
        motions.push(vec3(out[0], out[1], out[2]));
    }
    if let Some(t) = trace {
        t.object_count = object_count;
    }
    Ok(motions)
}

/// Predicted per-vertex motion for one transition; effector vertices get an
/// exact zero (their motion comes from the action channel).
pub fn forward(
    params: &DynModelParams,
    features: &FeatureBatch,
    edges: &[Edge],
) -> Result<Vec<Vec3>> {
    forward_impl(params, features, edges, None)
}

pub fn forward_traced(
    params: &DynModelParams,
    features: &FeatureBatch,
    edges: &[Edge],
) -> Result<(Vec<Vec3>, StepTrace)> {
    let mut trace = StepTrace::default();
    let motions = forward_impl(params, features, edges, Some(&mut trace))?;
    Ok((motions, trace))
}

#[derive(Clone, Debug)]
pub struct FeatureGrads {
    pub vertex: Vec<f64>,
    pub edge: Vec<f64>,
}

/// Exact reverse-mode gradients for one forward application. `upstream` is
/// dLoss/dMotion per vertex (effector rows are ignored: their output is
/// constant zero). Parameter gradients accumulate into `grads`.
pub fn backward(
    params: &DynModelParams,
    features: &FeatureBatch,
    edges: &[Edge],
    trace: &StepTrace,
    upstream: &[Vec3],
    grads: &mut DynGrads,
) -> Result<FeatureGrads> {
    let n = features.n;
    if upstream.len() != n {
        return Err(Error::shape(format!(
            "backward: upstream gradient has {} rows, expected {}",
            upstream.len(),
            n
        )));
    }
    if trace.prop.len() != params.p
        || trace.vertex_enc.len() != n
        || trace.edge_enc.len() != edges.len()
    {
        return Err(Error::shape("backward: trace does not match features and edges"));
    }
    let vd = vertex_feature_dim(params.k);
    let h = params.hidden_dim;

    // Decoder: applications were recorded for object vertices in order.
    let mut grad_latents = vec![vec![0.0; h]; n];
    let mut deco_it = trace.decoder.iter();
    for i in 0..n {
        let is_effector = features.vertex[i * vd + 3 * params.k + 1] == 1.0;
        if is_effector {
            continue;
        }
        let app = deco_it
            .next()
            .ok_or_else(|| Error::shape("backward: decoder trace shorter than object count"))?;
        let g = [upstream[i].x, upstream[i].y, upstream[i].z];
        grad_latents[i] = params.decoder.backward(app, &g, &mut grads.decoder);
    }

    // Edge latents feed every propagation step; their gradient accumulates
    // across steps and flows through the edge encoder at the end.
    let mut grad_edge_latents = vec![vec![0.0; h]; edges.len()];
    for (s, (msg_mlp, upd_mlp)) in params.steps.iter().enumerate().rev() {
        let (msg_apps, upd_apps) = &trace.prop[s];
        if msg_apps.len() != edges.len() || upd_apps.len() != n {
            return Err(Error::shape("backward: propagation trace shape mismatch"));
        }
        let mut grad_prev = vec![vec![0.0; h]; n];
        let mut grad_agg = vec![vec![0.0; h]; n];
        for i in 0..n {
            let gin = upd_mlp.backward(&upd_apps[i], &grad_latents[i], &mut grads.steps[s].1);
            for (d, v) in grad_prev[i].iter_mut().zip(&gin[..h]) {
                *d += v;
            }
            for (d, v) in grad_agg[i].iter_mut().zip(&gin[h..]) {
                *d += v;
            }
        }
        for (ei, e) in edges.iter().enumerate() {
            let gin = msg_mlp.backward(&msg_apps[ei], &grad_agg[e.to], &mut grads.steps[s].0);
            for (d, v) in grad_prev[e.from].iter_mut().zip(&gin[..h]) {
                *d += v;
            }
            for (d, v) in grad_prev[e.to].iter_mut().zip(&gin[h..2 * h]) {
                *d += v;
            }
            for (d, v) in grad_edge_latents[ei].iter_mut().zip(&gin[2 * h..]) {
                *d += v;
            }
        }
        grad_latents = grad_prev;
    }

    let mut grad_vertex = vec![0.0; n * vd];
    for i in 0..n {
        let gin =
            params.vertex_enc.backward(&trace.vertex_enc[i], &grad_latents[i], &mut grads.vertex_enc);
        grad_vertex[i * vd..(i + 1) * vd].copy_from_slice(&gin);
    }
    let mut grad_edge = vec![0.0; edges.len() * EDGE_FEATURE_DIM];
    for ei in 0..edges.len() {
        let gin = params.edge_enc.backward(
            &trace.edge_enc[ei],
            &grad_edge_latents[ei],
            &mut grads.edge_enc,
        );
        grad_edge[ei * EDGE_FEATURE_DIM..(ei + 1) * EDGE_FEATURE_DIM].copy_from_slice(&gin);
    }
    Ok(FeatureGrads { vertex: grad_vertex, edge: grad_edge })
}

/// Recurrent prediction: step h places the effector at actions[h], rebuilds
/// threshold edges, predicts object motion, and advances the graph. Output
/// frame h holds the advanced object vertices with the effector at
/// actions[h].
pub fn rollout(
    params: &DynModelParams,
    graph0: &ControlGraph,
    actions: &[Vec3],
) -> Result<Vec<Vec<Vec3>>> {
    Ok(rollout_impl(params, graph0, actions, false)?.0)
}

/// As `rollout`, additionally recording everything needed for reverse-mode
/// gradients through the whole recurrence.
pub fn rollout_traced(
    params: &DynModelParams,
    graph0: &ControlGraph,
    actions: &[Vec3],
) -> Result<(Vec<Vec<Vec3>>, RolloutTape)> {
    let (outputs, tape) = rollout_impl(params, graph0, actions, true)?;
    Ok((outputs, tape.expect("tracing was requested")))
}

fn rollout_impl(
    params: &DynModelParams,
    graph0: &ControlGraph,
    actions: &[Vec3],
    traced: bool,
) -> Result<(Vec<Vec<Vec3>>, Option<RolloutTape>)> {
    if actions.is_empty() {
        return Err(Error::invalid("rollout: need at least one action"));
    }
    graph0.validate()?;
    if graph0.history.len() != params.k {
        return Err(Error::shape(format!(
            "rollout: graph history window {} does not match model k={}",
            graph0.history.len(),
            params.k
        )));
    }
    let mut graph = graph0.clone();
    let n_obj = graph.num_object_vertices();
    let mut outputs = Vec::with_capacity(actions.len());
    let mut tape = traced.then(|| RolloutTape {
        k: params.k,
        n_obj,
        steps: Vec::with_capacity(actions.len()),
    });
    for &action in actions {
        let snapshot = graph.vertex_positions.clone();
        graph.set_effector(action);
        graph.rebuild_edges();
        let features = encode_features(&graph)?;
        let (motions, step_trace) = if traced {
            let (m, t) = forward_traced(params, &features, &graph.edges)?;
            (m, Some(t))
        } else {
            (forward(params, &features, &graph.edges)?, None)
        };
        let new_object: Vec<Vec3> = graph
            .object_positions()
            .iter()
            .zip(&motions)
            .map(|(p, m)| *p + *m)
            .collect();
        if let Some(t) = tape.as_mut() {
            t.steps.push(TapeStep {
                edges: graph.edges.clone(),
                features: features.clone(),
                trace: step_trace.expect("traced"),
            });
        }
        graph.advance(snapshot, &new_object);
        outputs.push(graph.vertex_positions.clone());
    }
    Ok((outputs, tape))
}

struct TapeStep {
    edges: Vec<Edge>,
    features: FeatureBatch,
    trace: StepTrace,
}

/// Reverse-mode state for a traced rollout. Frames are numbered 0..=H with
/// frame 0 the initial graph state; output h corresponds to frame h+1.
pub struct RolloutTape {
    k: usize,
    n_obj: usize,
    steps: Vec<TapeStep>,
}

impl RolloutTape {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Edge list the network saw at step h (effector already moved).
    pub fn step_edges(&self, h: usize) -> &[Edge] {
        &self.steps[h].edges
    }

    /// Backpropagates dLoss/d(object positions) given per output frame.
    /// `grad_outputs[h]` has one entry per object vertex for frame h+1.
    pub fn backward(
        &self,
        params: &DynModelParams,
        grad_outputs: &[Vec<Vec3>],
    ) -> Result<DynGrads> {
        let h_len = self.steps.len();
        if grad_outputs.len() != h_len {
            return Err(Error::shape(format!(
                "tape backward: {} gradient frames for a {}-step rollout",
                grad_outputs.len(),
                h_len
            )));
        }
        for g in grad_outputs {
            if g.len() != self.n_obj {
                return Err(Error::shape("tape backward: gradient frame has wrong vertex count"));
            }
        }
        let mut grads = params.zeros_like();
        // grad_frames[f] = dLoss/d(object positions at frame f), f in 0..=H.
        // Frame 0 is the constant initial state; its slot absorbs and
        // discards gradients so the scatter below stays uniform.
        let mut grad_frames = vec![vec![Vec3::ZERO; self.n_obj]; h_len + 1];
        for (h, g) in grad_outputs.iter().enumerate() {
            for (dst, src) in grad_frames[h + 1].iter_mut().zip(g) {
                *dst += *src;
            }
        }
        let vd = vertex_feature_dim(self.k);
        for h in (0..h_len).rev() {
            let step = &self.steps[h];
            let upstream: Vec<Vec3> = {
                let mut u = grad_frames[h + 1].clone();
                u.push(Vec3::ZERO); // effector row, ignored
                u
            };
            let fg = backward(params, &step.features, &step.edges, &step.trace, &upstream, &mut grads)?;

            // Identity carry: frame h+1 = frame h + motion.
            for i in 0..self.n_obj {
                let carry = grad_frames[h + 1][i];
                grad_frames[h][i] += carry;
            }
            // Scatter feature gradients. Object vertex i at step h: motion
            // slot j touches frames h-j and h-j-1; the table-distance slot
            // touches frame h's z. Effector rows and pre-frame-0 history are
            // constants and are dropped.
            for i in 0..self.n_obj {
                let row = &fg.vertex[i * vd..(i + 1) * vd];
                for j in 0..self.k {
                    let g = vec3(row[3 * j], row[3 * j + 1], row[3 * j + 2]);
                    if h >= j {
                        grad_frames[h - j][i] += g;
                    }
                    if h >= j + 1 {
                        grad_frames[h - j - 1][i] -= g;
                    }
                }
                grad_frames[h][i].z += row[vd - 1];
            }
            // Edge position differences: receiver minus sender at frame h
            // (object endpoints only; the effector endpoint is an action).
            for (ei, e) in step.edges.iter().enumerate() {
                let g = vec3(
                    fg.edge[ei * EDGE_FEATURE_DIM],
                    fg.edge[ei * EDGE_FEATURE_DIM + 1],
                    fg.edge[ei * EDGE_FEATURE_DIM + 2],
                );
                if e.to < self.n_obj {
                    grad_frames[h][e.to] += g;
                }
                if e.from < self.n_obj {
                    grad_frames[h][e.from] -= g;
                }
            }
        }
        Ok(grads)
    }
}

/// Shifts every bias to a small nonzero value, deterministically.
///
/// Finite differences are only a valid derivative oracle at points where the
/// loss is differentiable. With zero-initialized biases a fully dead layer
/// feeds zeros forward, which parks the next layer's pre-activations exactly
/// on the ReLU kink (pre = b = 0): the analytic gradient takes the flat side
/// while a central probe straddles the kink and reports half the live slope.
/// Nonzero biases keep pre-activations away from zero for generic weights, so
/// gradient tests call this on any net they probe.
#[cfg(test)]
pub(crate) fn nudge_biases(params: &mut DynModelParams, scale: f64) {
    let mut mlps: Vec<&mut Mlp> = vec![&mut params.vertex_enc, &mut params.edge_enc];
    for (msg, upd) in params.steps.iter_mut() {
        mlps.push(msg);
        mlps.push(upd);
    }
    mlps.push(&mut params.decoder);
    let mut c = 0u64;
    for mlp in mlps {
        for layer in mlp.layers.iter_mut() {
            for b in layer.b.iter_mut() {
                c += 1;
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                *b = sign * scale * (1.0 + 0.13 * (c % 7) as f64);
            }
        }
    }
}
